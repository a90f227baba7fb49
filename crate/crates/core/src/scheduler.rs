//! Single-lane cooperative scheduler: round-robin chunked prefill across
//! agents, interleaved with batched decode steps.
//!
//! Each [`Scheduler::step`] performs exactly one unit of work. When both
//! prefill and decode work exist the two kinds alternate, so a long prompt
//! never stalls agents that are already generating. Each agent runs at most
//! one request at a time; later requests for the same agent wait in the
//! queue and see the cache left by the earlier one.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::agent_cache::{AgentCache, CacheState, LayerKv};
use crate::batch_cache::{self, BatchCache, BatchLayerKv, DEFAULT_MAX_BATCH};
use crate::block_pool::BlockPool;
use crate::error::{CacheError, Result};
use crate::model_spec::ModelCacheSpec;
use crate::prefix_matcher::{self, Verdict};

pub const DEFAULT_CHUNK_TOKENS: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    pub agent_id: String,
    pub prompt: String,
    pub max_tokens: usize,
    /// Reuse and keep the agent's cache across requests. Without it the
    /// request starts from an empty cache and the cache is discarded after.
    #[serde(default = "default_true")]
    pub persistent_cache_prefix: bool,
}

fn default_true() -> bool {
    true
}

/// Token ids with the char offset (relative to the tokenized text) at which
/// each token starts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tokenized {
    pub token_ids: Vec<u32>,
    pub char_offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedToken {
    pub token_id: u32,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// One token per batch row.
    pub tokens: Vec<GeneratedToken>,
    /// KV of the generated tokens, one entry per layer.
    pub kv: Vec<BatchLayerKv>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineCounters {
    pub prefill_calls: u64,
    pub prefill_tokens: u64,
    pub decode_steps: u64,
    pub decode_rows: u64,
    pub reentrancy_violations: u64,
}

/// The model. Implementations must be deterministic in their inputs.
pub trait Engine {
    /// Tokenizes `text` for `agent_id`, whose first token lands at `start_pos`.
    fn tokenize(&self, agent_id: &str, start_pos: usize, text: &str) -> Tokenized;

    /// FP32 KV for `token_ids` at positions `cache.token_count()..`.
    fn prefill_chunk(&self, cache: &AgentCache, token_ids: &[u32]) -> Result<Vec<LayerKv>>;

    /// Generates one token per batch row, given each row's last token.
    fn decode_step(&self, batch: &BatchCache, last_tokens: &[u32]) -> Result<Decoded>;

    fn counters(&self) -> EngineCounters;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EventKind {
    FirstToken {
        token_id: u32,
        text: String,
    },
    Token {
        token_id: u32,
        text: String,
    },
    Done {
        generated: usize,
        prefill_tokens: usize,
        reused_tokens: usize,
        /// Absent when the request did not consult the cache.
        verdict: Option<Verdict>,
        error: Option<String>,
    },
    CacheSaved {
        bytes: u64,
        error: Option<String>,
    },
    CacheLoaded {
        bytes: u64,
        error: Option<String>,
    },
    Evicted {
        bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub request_id: Option<String>,
    pub agent_id: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// One executed unit of work, for inspecting interleaving.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "work", rename_all = "snake_case")]
pub enum WorkUnit {
    Prefill { step: u64, agent_id: String, request_id: String, start: usize, tokens: usize },
    Decode { step: u64, agent_ids: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub chunk_tokens: usize,
    pub max_batch: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { chunk_tokens: DEFAULT_CHUNK_TOKENS, max_batch: DEFAULT_MAX_BATCH }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub steps: u64,
    pub prefill_chunks: u64,
    pub decode_steps: u64,
    pub pending: usize,
    pub active: usize,
    pub completed: u64,
    /// Largest resident-plus-staged byte count seen while prefilling.
    pub peak_prefill_bytes: u64,
    /// FP32 size of one full chunk for this spec.
    pub chunk_staging_bytes: u64,
}

#[derive(Debug)]
enum Phase {
    Prefill { pending: Tokenized, text: String, done: usize },
    Decode { generated: usize, last_token: u32 },
}

#[derive(Debug)]
struct Active {
    request: Request,
    phase: Phase,
    prefill_tokens: usize,
    reused_tokens: usize,
    verdict: Option<Verdict>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Prefill,
    Decode,
}

pub struct Scheduler<E: Engine> {
    engine: E,
    pool: BlockPool,
    spec: Arc<ModelCacheSpec>,
    config: SchedulerConfig,
    queue: VecDeque<Request>,
    active: Vec<Active>,
    prefill_order: VecDeque<String>,
    decode_order: VecDeque<String>,
    seen_ids: HashSet<String>,
    last_kind: Option<Kind>,
    tick: u64,
    stats: SchedulerStats,
    work_log: Vec<WorkUnit>,
}

impl<E: Engine> Scheduler<E> {
    pub fn new(engine: E, pool: BlockPool, config: SchedulerConfig) -> Self {
        let spec = Arc::clone(pool.spec());
        let per_token = (spec.num_layers() * spec.num_kv_heads() * (spec.k_head_dim() + spec.v_head_dim()) * 4) as u64;
        let config = SchedulerConfig { chunk_tokens: config.chunk_tokens.max(1), max_batch: config.max_batch.max(1) };
        Scheduler {
            engine,
            pool,
            spec,
            stats: SchedulerStats { chunk_staging_bytes: per_token * config.chunk_tokens as u64, ..Default::default() },
            config,
            queue: VecDeque::new(),
            active: Vec::new(),
            prefill_order: VecDeque::new(),
            decode_order: VecDeque::new(),
            seen_ids: HashSet::new(),
            last_kind: None,
            tick: 0,
            work_log: Vec::new(),
        }
    }

    pub fn engine(&self) -> &E {
        &self.engine
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut BlockPool {
        &mut self.pool
    }

    pub fn config(&self) -> SchedulerConfig {
        self.config
    }

    pub fn stats(&self) -> SchedulerStats {
        SchedulerStats { pending: self.queue.len(), active: self.active.len(), ..self.stats.clone() }
    }

    pub fn work_log(&self) -> &[WorkUnit] {
        &self.work_log
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.active.is_empty()
    }

    pub fn submit(&mut self, request: Request) -> Result<()> {
        if request.max_tokens == 0 {
            return Err(CacheError::InvalidArgument("max_tokens must be at least 1".into()));
        }
        if !self.seen_ids.insert(request.request_id.clone()) {
            return Err(CacheError::InvalidArgument(format!(
                "duplicate request id {:?}",
                request.request_id
            )));
        }
        self.queue.push_back(request);
        Ok(())
    }

    /// Performs one unit of work and returns the events it produced.
    pub fn step(&mut self) -> Vec<Event> {
        let mut events = Vec::new();
        self.activate(&mut events);
        let has_prefill = !self.prefill_order.is_empty();
        let has_decode = !self.decode_order.is_empty();
        let kind = match (has_prefill, has_decode) {
            (false, false) => return events,
            (true, false) => Kind::Prefill,
            (false, true) => Kind::Decode,
            (true, true) if self.last_kind == Some(Kind::Prefill) => Kind::Decode,
            (true, true) => Kind::Prefill,
        };
        self.stats.steps += 1;
        self.last_kind = Some(kind);
        match kind {
            Kind::Prefill => self.prefill_step(&mut events),
            Kind::Decode => self.decode_step(&mut events),
        }
        self.drain_evictions(&mut events);
        events
    }

    pub fn run_until_idle(&mut self) -> Vec<Event> {
        let mut trace = Vec::new();
        while !self.is_idle() {
            trace.extend(self.step());
        }
        trace
    }

    /// Persists every resident agent.
    pub fn save_all(&mut self) -> Vec<Event> {
        let mut events = Vec::new();
        for agent in self.pool.hot_agent_ids() {
            let kind = match self.pool.persist(&agent) {
                Ok((_, bytes)) => EventKind::CacheSaved { bytes, error: None },
                Err(e) => EventKind::CacheSaved { bytes: 0, error: Some(e.to_string()) },
            };
            self.emit(&mut events, None, &agent, kind);
        }
        events
    }

    /// Loads the named agents from disk. Failures are reported per agent.
    pub fn restore(&mut self, agent_ids: &[String]) -> Vec<Event> {
        let mut events = Vec::new();
        for agent in agent_ids {
            let kind = match self.pool.restore(agent) {
                Ok(bytes) => EventKind::CacheLoaded { bytes, error: None },
                Err(e) => EventKind::CacheLoaded { bytes: 0, error: Some(e.to_string()) },
            };
            self.emit(&mut events, None, agent, kind);
            self.drain_evictions(&mut events);
        }
        events
    }

    fn emit(&mut self, events: &mut Vec<Event>, request_id: Option<&str>, agent_id: &str, kind: EventKind) {
        self.tick += 1;
        events.push(Event {
            tick: self.tick,
            request_id: request_id.map(str::to_string),
            agent_id: agent_id.to_string(),
            kind,
        });
    }

    fn drain_evictions(&mut self, events: &mut Vec<Event>) {
        for ev in self.pool.take_evictions() {
            self.emit(events, None, &ev.agent_id, EventKind::Evicted { bytes: ev.bytes });
        }
    }

    /// Starts queued requests whose agent is idle, in submission order.
    fn activate(&mut self, events: &mut Vec<Event>) {
        let mut busy: HashSet<String> = self.active.iter().map(|a| a.request.agent_id.clone()).collect();
        let mut waiting = VecDeque::new();
        while let Some(request) = self.queue.pop_front() {
            if busy.contains(&request.agent_id) {
                waiting.push_back(request);
                continue;
            }
            busy.insert(request.agent_id.clone());
            if let Err(e) = self.start(request.clone(), events) {
                self.finish_failed(&request, 0, 0, 0, None, e.to_string(), events);
            }
        }
        self.queue = waiting;
    }

    fn start(&mut self, request: Request, events: &mut Vec<Event>) -> Result<()> {
        let agent = request.agent_id.clone();
        let was_stored = self.pool.state(&agent) == CacheState::Warm
            || (self.pool.state(&agent) == CacheState::Cold
                && crate::persistence::sidecar_path(&self.pool.config().cache_dir, &agent).exists());
        let (verdict, reuse_tokens, suffix) = if request.persistent_cache_prefix {
            match self.pool.get_cache(&agent) {
                Ok(cache) => {
                    let bytes = cache.nbytes();
                    let m = prefix_matcher::match_prompt(cache, &request.prompt, self.spec.block_tokens());
                    if was_stored {
                        self.emit(events, Some(&request.request_id), &agent, EventKind::CacheLoaded { bytes, error: None });
                    }
                    (Some(m.verdict), m.reuse_tokens, m.suffix_text)
                }
                Err(CacheError::NotFound(_)) => (Some(Verdict::Diverge), 0, request.prompt.clone()),
                Err(e) => return Err(e),
            }
        } else {
            (None, 0, request.prompt.clone())
        };
        self.drain_evictions(events);
        // Anything past the reused prefix is replaced by the new suffix.
        match self.pool.truncate(&agent, reuse_tokens) {
            Ok(()) | Err(CacheError::NotFound(_)) => {}
            Err(e) => return Err(e),
        }
        let pending = self.engine.tokenize(&agent, reuse_tokens, &suffix);
        debug!(agent = %agent, ?verdict, reuse_tokens, suffix_tokens = pending.token_ids.len(), "request started");
        let phase = if pending.token_ids.is_empty() {
            let last_token = self.pool.peek(&agent).and_then(|c| c.token_ids.last().copied()).unwrap_or(0);
            self.decode_order.push_back(agent.clone());
            Phase::Decode { generated: 0, last_token }
        } else {
            self.prefill_order.push_back(agent.clone());
            Phase::Prefill { pending, text: suffix, done: 0 }
        };
        self.active.push(Active { request, phase, prefill_tokens: 0, reused_tokens: reuse_tokens, verdict });
        Ok(())
    }

    fn active_index(&self, agent: &str) -> usize {
        self.active.iter().position(|a| a.request.agent_id == agent).expect("agent is active")
    }

    fn prefill_step(&mut self, events: &mut Vec<Event>) {
        let agent = self.prefill_order.pop_front().expect("prefill work exists");
        let idx = self.active_index(&agent);
        let (ids, offsets, text, start) = {
            let Phase::Prefill { pending, text, done } = &self.active[idx].phase else {
                unreachable!("agent in prefill order is prefilling")
            };
            let end = (*done + self.config.chunk_tokens).min(pending.token_ids.len());
            let c0 = pending.char_offsets[*done];
            let c1 = pending.char_offsets.get(end).copied().unwrap_or_else(|| text.chars().count());
            let chunk_text: String = text.chars().skip(c0).take(c1 - c0).collect();
            let offs: Vec<usize> = pending.char_offsets[*done..end].iter().map(|o| o - c0).collect();
            (pending.token_ids[*done..end].to_vec(), offs, chunk_text, *done)
        };
        self.stats.prefill_chunks += 1;
        self.work_log.push(WorkUnit::Prefill {
            step: self.stats.steps,
            agent_id: agent.clone(),
            request_id: self.active[idx].request.request_id.clone(),
            start,
            tokens: ids.len(),
        });
        let result = self.run_prefill(&agent, &ids, &offsets, &text);
        let active = &mut self.active[idx];
        match result {
            Ok(()) => {
                active.prefill_tokens += ids.len();
                let Phase::Prefill { pending, done, .. } = &mut active.phase else { unreachable!() };
                *done += ids.len();
                if *done == pending.token_ids.len() {
                    let last_token = *pending.token_ids.last().expect("non-empty prefill");
                    active.phase = Phase::Decode { generated: 0, last_token };
                    self.decode_order.push_back(agent);
                } else {
                    self.prefill_order.push_back(agent);
                }
            }
            Err(e) => {
                let a = self.active.remove(idx);
                self.finish_failed(&a.request, 0, a.prefill_tokens, a.reused_tokens, a.verdict, e.to_string(), events);
            }
        }
    }

    fn run_prefill(&mut self, agent: &str, ids: &[u32], offsets: &[usize], text: &str) -> Result<()> {
        let staged = self.stats.chunk_staging_bytes / self.config.chunk_tokens as u64 * ids.len() as u64;
        let resident = self.pool.stats().resident_bytes;
        self.stats.peak_prefill_bytes = self.stats.peak_prefill_bytes.max(resident + staged);
        let kv = match self.pool.get_cache(agent) {
            Ok(cache) => self.engine.prefill_chunk(cache, ids)?,
            Err(CacheError::NotFound(_)) => {
                let empty = AgentCache::empty(agent, &self.spec);
                self.engine.prefill_chunk(&empty, ids)?
            }
            Err(e) => return Err(e),
        };
        self.pool.append_tokens(agent, &kv, ids, offsets, text)?;
        let resident = self.pool.stats().resident_bytes;
        self.stats.peak_prefill_bytes = self.stats.peak_prefill_bytes.max(resident);
        Ok(())
    }

    fn decode_step(&mut self, events: &mut Vec<Event>) {
        let take = self.config.max_batch.min(self.decode_order.len());
        let rows: Vec<String> = self.decode_order.drain(..take).collect();
        self.stats.decode_steps += 1;
        self.work_log.push(WorkUnit::Decode { step: self.stats.steps, agent_ids: rows.clone() });
        match self.decode_rows(&rows) {
            Ok(tokens) => {
                for (agent, tok) in rows.iter().zip(tokens) {
                    self.advance(agent, tok, events);
                }
            }
            // Retry rows one at a time so one failing agent does not fail the others.
            Err(_) if rows.len() > 1 => {
                for agent in &rows {
                    match self.decode_rows(std::slice::from_ref(agent)) {
                        Ok(mut t) => self.advance(agent, t.remove(0), events),
                        Err(e) => self.fail_active(agent, e, events),
                    }
                }
            }
            Err(e) => self.fail_active(&rows[0], e, events),
        }
    }

    fn decode_rows(&mut self, rows: &[String]) -> Result<Vec<GeneratedToken>> {
        let mut caches = Vec::with_capacity(rows.len());
        let mut last = Vec::with_capacity(rows.len());
        for agent in rows {
            let cache = self.pool.checkout(agent)?.unwrap_or_else(|| AgentCache::empty(agent.as_str(), &self.spec));
            let Phase::Decode { last_token, .. } = self.active[self.active_index(agent)].phase else {
                unreachable!("agent in decode order is decoding")
            };
            last.push(last_token);
            caches.push(cache);
        }
        let refs: Vec<&AgentCache> = caches.iter().collect();
        let mut batch = batch_cache::merge(&refs, &self.spec, self.config.max_batch)?;
        let out = self.engine.decode_step(&batch, &last)?;
        if out.tokens.len() != rows.len() {
            return Err(CacheError::Engine(format!("{} tokens for {} rows", out.tokens.len(), rows.len())));
        }
        batch.update_and_fetch(&self.spec, &out.kv)?;
        for ((mut cache, blocks), tok) in caches.into_iter().zip(batch.extract(&self.spec)).zip(&out.tokens) {
            cache.blocks = blocks;
            let at = cache.transcript_chars();
            cache.token_ids.push(tok.token_id);
            cache.char_offsets.push(at);
            cache.transcript_text.push_str(&tok.text);
            self.pool.put_cache(cache)?;
        }
        Ok(out.tokens)
    }

    fn advance(&mut self, agent: &str, tok: GeneratedToken, events: &mut Vec<Event>) {
        let idx = self.active_index(agent);
        let Phase::Decode { generated, last_token } = &mut self.active[idx].phase else {
            unreachable!("agent in decode order is decoding")
        };
        *generated += 1;
        *last_token = tok.token_id;
        let (n, request_id) = (*generated, self.active[idx].request.request_id.clone());
        let kind = if n == 1 {
            EventKind::FirstToken { token_id: tok.token_id, text: tok.text }
        } else {
            EventKind::Token { token_id: tok.token_id, text: tok.text }
        };
        self.emit(events, Some(&request_id), agent, kind);
        if n < self.active[idx].request.max_tokens {
            self.decode_order.push_back(agent.to_string());
            return;
        }
        let a = self.active.remove(idx);
        if !a.request.persistent_cache_prefix {
            let _ = self.pool.drop_agent(agent, true);
        }
        self.stats.completed += 1;
        self.emit(
            events,
            Some(&request_id),
            agent,
            EventKind::Done {
                generated: n,
                prefill_tokens: a.prefill_tokens,
                reused_tokens: a.reused_tokens,
                verdict: a.verdict,
                error: None,
            },
        );
    }

    fn fail_active(&mut self, agent: &str, err: CacheError, events: &mut Vec<Event>) {
        let idx = self.active_index(agent);
        let a = self.active.remove(idx);
        let generated = match a.phase {
            Phase::Decode { generated, .. } => generated,
            Phase::Prefill { .. } => 0,
        };
        debug!(agent, error = %err, generated, "request failed");
        self.finish_failed(&a.request, generated, a.prefill_tokens, a.reused_tokens, a.verdict, err.to_string(), events);
    }

    fn finish_failed(
        &mut self,
        request: &Request,
        generated: usize,
        prefill_tokens: usize,
        reused_tokens: usize,
        verdict: Option<Verdict>,
        error: String,
        events: &mut Vec<Event>,
    ) {
        self.stats.completed += 1;
        self.emit(
            events,
            Some(&request.request_id),
            &request.agent_id,
            EventKind::Done { generated, prefill_tokens, reused_tokens, verdict, error: Some(error) },
        );
    }
}
