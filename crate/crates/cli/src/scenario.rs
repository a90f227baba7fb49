//! Scripted multi-agent workloads on the synthetic engine.
//!
//! Each scenario runs in two modes on fresh pools. Prompts are built from
//! each agent's transcript (prompt plus streamed tokens), so both modes see
//! byte-identical prompts and differ only in whether caches are reused.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use agentcache::block_pool::{BlockPool, PoolConfig, DEFAULT_BUDGET_BYTES};
use agentcache::model_spec::preset;
use agentcache::scheduler::{
    Engine, Event, EventKind, Request, Scheduler, SchedulerConfig, WorkUnit, DEFAULT_CHUNK_TOKENS,
};
use agentcache::synthetic::SyntheticEngine;
use agentcache::batch_cache::DEFAULT_MAX_BATCH;
use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::plot::BarChart;

pub const SCENARIOS: &[&str] = &["phase5", "routing10", "staggered"];

const VOCAB: &[&str] = &[
    "the", "warden", "asked", "about", "night", "deal", "silence", "partner", "cell", "yard", "offer",
    "confess", "years", "trust", "evidence", "witness", "alibi", "motive", "record", "quiet", "sentence",
    "lawyer", "window", "door", "signal", "plan", "risk", "reward", "betray", "cooperate", "question",
    "answer", "posterior", "prior", "variance", "sample", "chain", "estimate", "model", "regression",
    "hypothesis", "interval", "likelihood", "density", "random", "walk", "kernel", "bootstrap",
];

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    pub seed: u64,
    pub model: String,
    pub budget_bytes: u64,
    pub chunk_tokens: usize,
    pub max_batch: usize,
    /// Directory for per-mode cache subdirectories; a temp dir when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            seed: 0,
            model: "tiny".into(),
            budget_bytes: DEFAULT_BUDGET_BYTES,
            chunk_tokens: DEFAULT_CHUNK_TOKENS,
            max_batch: DEFAULT_MAX_BATCH,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PhaseReport {
    pub phase: String,
    pub turns: usize,
    /// Tokens the engine prefilled during the phase.
    pub prefill_tokens: u64,
    /// Tokens served from cache, summed over the phase's requests.
    pub reused_tokens: usize,
    /// `reused_tokens` restricted to permanent agents.
    pub permanent_reused_tokens: usize,
    pub decode_steps: u64,
    pub evictions: u64,
    pub reloads: u64,
    pub verdicts: BTreeMap<String, usize>,
    pub failures: usize,
}

impl PhaseReport {
    pub fn reuse_ratio(&self) -> f64 {
        let total = self.prefill_tokens as f64 + self.reused_tokens as f64;
        if total == 0.0 {
            0.0
        } else {
            self.reused_tokens as f64 / total
        }
    }
}

/// Per-agent structural latency in a staggered run, counted in scheduler steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArrivalReport {
    pub agent_id: String,
    pub submitted_step: u64,
    pub first_token_step: u64,
    pub done_step: u64,
    /// `first_token_step - submitted_step`.
    pub steps_to_first_token: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub mode: String,
    pub phases: Vec<PhaseReport>,
    pub total_prefill_tokens: u64,
    pub total_reused_tokens: usize,
    /// Prefill chunk order, one agent id per chunk (staggered only).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub chunk_order: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub arrivals: Vec<ArrivalReport>,
    pub reentrancy_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub model: String,
    pub chunk_tokens: usize,
    pub budget_bytes: u64,
    pub modes: Vec<ModeReport>,
    #[serde(skip)]
    pub trace: Vec<Value>,
}

impl ScenarioReport {
    pub fn mode(&self, name: &str) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == name)
    }

    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|v| format!("{v}\n")).collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!("scenario {} (seed {}, model {})\n", self.scenario, self.seed, self.model);
        for m in &self.modes {
            out.push_str(&format!("\n[{}]\n", m.mode));
            out.push_str(&format!(
                "{:<16} {:>5} {:>9} {:>9} {:>7} {:>7} {:>5} {:>7}  {}\n",
                "phase", "turns", "prefill", "reused", "ratio", "decode", "evict", "reload", "verdicts"
            ));
            for p in &m.phases {
                let verdicts: Vec<String> = p.verdicts.iter().map(|(k, v)| format!("{k}={v}")).collect();
                out.push_str(&format!(
                    "{:<16} {:>5} {:>9} {:>9} {:>7.3} {:>7} {:>5} {:>7}  {}\n",
                    p.phase,
                    p.turns,
                    p.prefill_tokens,
                    p.reused_tokens,
                    p.reuse_ratio(),
                    p.decode_steps,
                    p.evictions,
                    p.reloads,
                    verdicts.join(" ")
                ));
            }
            if !m.chunk_order.is_empty() {
                out.push_str(&format!("chunk order: {}\n", m.chunk_order.join(" ")));
            }
            for a in &m.arrivals {
                out.push_str(&format!(
                    "agent {}: submitted at step {}, first token at step {} ({} steps), done at step {}\n",
                    a.agent_id, a.submitted_step, a.first_token_step, a.steps_to_first_token, a.done_step
                ));
            }
        }
        out
    }

    pub fn chart(&self) -> BarChart<'static> {
        if self.scenario == "staggered" {
            let agents: Vec<String> = self.modes[0].arrivals.iter().map(|a| a.agent_id.clone()).collect();
            let series = self
                .modes
                .iter()
                .map(|m| (m.mode.clone(), m.arrivals.iter().map(|a| a.steps_to_first_token as f64).collect()))
                .collect();
            return BarChart {
                title: "Steps from submission to first token",
                y_label: "scheduler steps",
                categories: agents,
                series,
            };
        }
        let categories = self.modes[0].phases.iter().map(|p| p.phase.clone()).collect();
        let mut series: Vec<(String, Vec<f64>)> = self
            .modes
            .iter()
            .map(|m| (format!("{} prefill", m.mode), m.phases.iter().map(|p| p.prefill_tokens as f64).collect()))
            .collect();
        if let Some(m) = self.mode("persistent") {
            series.push(("persistent reused".into(), m.phases.iter().map(|p| p.reused_tokens as f64).collect()));
        }
        BarChart { title: "Tokens per phase", y_label: "tokens", categories, series }
    }
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| format!(" {}", VOCAB.choose(rng).expect("non-empty vocab"))).collect()
}

struct Turn {
    agent: String,
    prompt: String,
    max_tokens: usize,
    persistent: bool,
    permanent: bool,
}

struct Runner {
    sched: Scheduler<SyntheticEngine>,
    mode: String,
    reuse: bool,
    transcripts: BTreeMap<String, String>,
    trace: Vec<Value>,
    next_request: u64,
    _tmp: Option<tempfile::TempDir>,
}

impl Runner {
    fn new(opts: &ScenarioOptions, mode: &str, reuse: bool) -> Result<Runner> {
        let spec = Arc::new(preset(&opts.model)?);
        let (dir, tmp) = match &opts.cache_dir {
            Some(d) => {
                let dir = d.join(mode);
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
                }
                (dir, None)
            }
            None => {
                let t = tempfile::tempdir()?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        let pool = BlockPool::new(Arc::clone(&spec), PoolConfig { budget_bytes: opts.budget_bytes, cache_dir: dir });
        let config = SchedulerConfig { chunk_tokens: opts.chunk_tokens, max_batch: opts.max_batch };
        Ok(Runner {
            sched: Scheduler::new(SyntheticEngine::new(spec), pool, config),
            mode: mode.to_string(),
            reuse,
            transcripts: BTreeMap::new(),
            trace: Vec::new(),
            next_request: 0,
            _tmp: tmp,
        })
    }

    fn transcript(&self, agent: &str) -> &str {
        self.transcripts.get(agent).map_or("", String::as_str)
    }

    fn request(&mut self, turn: &Turn) -> Request {
        self.next_request += 1;
        Request {
            request_id: format!("{}-{}", turn.agent, self.next_request),
            agent_id: turn.agent.clone(),
            prompt: turn.prompt.clone(),
            max_tokens: turn.max_tokens,
            persistent_cache_prefix: self.reuse && turn.persistent,
        }
    }

    fn record(&mut self, phase: &str, events: &[Event]) {
        for ev in events {
            self.trace.push(json!({"mode": self.mode, "phase": phase, "event": ev}));
        }
    }

    /// Submits every turn, runs to idle, and updates transcripts.
    fn run_phase(&mut self, phase: &str, turns: &[Turn]) -> Result<PhaseReport> {
        let before_engine = self.sched.engine().counters();
        let before_pool = self.sched.pool().stats();
        let before_decode = self.sched.stats().decode_steps;
        let work_before = self.sched.work_log().len();
        let mut prompts = BTreeMap::new();
        let mut permanent = BTreeMap::new();
        for turn in turns {
            let r = self.request(turn);
            prompts.insert(r.request_id.clone(), (turn.agent.clone(), turn.prompt.clone()));
            permanent.insert(r.request_id.clone(), turn.permanent);
            self.sched.submit(r)?;
        }
        let events = self.sched.run_until_idle();
        self.record(phase, &events);
        for w in &self.sched.work_log()[work_before..] {
            self.trace.push(json!({"mode": self.mode, "phase": phase, "work": w}));
        }
        let mut report = PhaseReport { phase: phase.to_string(), turns: turns.len(), ..Default::default() };
        let mut generated: BTreeMap<String, String> = BTreeMap::new();
        for ev in &events {
            let Some(rid) = &ev.request_id else { continue };
            match &ev.kind {
                EventKind::FirstToken { text, .. } | EventKind::Token { text, .. } => {
                    generated.entry(rid.clone()).or_default().push_str(text);
                }
                EventKind::Done { reused_tokens, verdict, error, .. } => {
                    report.reused_tokens += reused_tokens;
                    if permanent.get(rid).copied().unwrap_or(false) {
                        report.permanent_reused_tokens += reused_tokens;
                    }
                    let v = verdict.map_or("NONE".to_string(), |v| {
                        serde_json::to_value(v).ok().and_then(|x| x.as_str().map(str::to_string)).unwrap_or_default()
                    });
                    *report.verdicts.entry(v).or_default() += 1;
                    if let Some(e) = error {
                        report.failures += 1;
                        warn_failed(rid, e);
                    }
                }
                _ => {}
            }
        }
        for (rid, (agent, prompt)) in prompts {
            let gen = generated.remove(&rid).unwrap_or_default();
            self.transcripts.insert(agent, format!("{prompt}{gen}"));
        }
        let after_engine = self.sched.engine().counters();
        let after_pool = self.sched.pool().stats();
        report.prefill_tokens = after_engine.prefill_tokens - before_engine.prefill_tokens;
        report.decode_steps = self.sched.stats().decode_steps - before_decode;
        report.evictions = after_pool.evictions - before_pool.evictions;
        report.reloads = after_pool.reloads - before_pool.reloads;
        Ok(report)
    }

    fn finish(self, phases: Vec<PhaseReport>) -> (ModeReport, Vec<Value>) {
        let report = ModeReport {
            mode: self.mode.clone(),
            total_prefill_tokens: phases.iter().map(|p| p.prefill_tokens).sum(),
            total_reused_tokens: phases.iter().map(|p| p.reused_tokens).sum(),
            phases,
            chunk_order: Vec::new(),
            arrivals: Vec::new(),
            reentrancy_violations: self.sched.engine().counters().reentrancy_violations,
        };
        (report, self.trace)
    }
}

fn warn_failed(request_id: &str, error: &str) {
    eprintln!("warning: request {request_id} failed: {error}");
}

pub fn run(name: &str, opts: &ScenarioOptions) -> Result<ScenarioReport> {
    let modes: Vec<(ModeReport, Vec<Value>)> = match name {
        "phase5" => vec![phase5(opts, "cold", false)?, phase5(opts, "persistent", true)?],
        "routing10" => vec![routing10(opts, "cold", false)?, routing10(opts, "persistent", true)?],
        "staggered" => vec![staggered(opts, "sequential", false)?, staggered(opts, "interleaved", true)?],
        other => bail!("unknown scenario {other:?}; expected one of {}", SCENARIOS.join(", ")),
    };
    let mut trace = Vec::new();
    let mut reports = Vec::new();
    for (m, t) in modes {
        reports.push(m);
        trace.extend(t);
    }
    Ok(ScenarioReport {
        scenario: name.to_string(),
        seed: opts.seed,
        model: opts.model.clone(),
        chunk_tokens: opts.chunk_tokens,
        budget_bytes: opts.budget_bytes,
        modes: reports,
        trace,
    })
}

pub const PHASE5_PERMANENT: &[&str] = &["warden", "marco", "danny"];
pub const PHASE5_EPHEMERAL: &str = "analyst";
const PHASE5_NAMES: &[&str] = &["interrogation-a", "interrogation-b", "yard", "reckoning", "verdict"];

/// Five phases; every permanent agent speaks once per phase and the
/// ephemeral analyst joins only the last one.
fn phase5(opts: &ScenarioOptions, mode: &str, reuse: bool) -> Result<(ModeReport, Vec<Value>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut runner = Runner::new(opts, mode, reuse)?;
    let mut phases = Vec::new();
    for (k, name) in PHASE5_NAMES.iter().enumerate() {
        let mut turns: Vec<Turn> = PHASE5_PERMANENT
            .iter()
            .map(|agent| {
                let n = rng.gen_range(60..120);
                Turn {
                    agent: agent.to_string(),
                    prompt: format!("{}{}", runner.transcript(agent), words(&mut rng, n)),
                    max_tokens: 8,
                    persistent: true,
                    permanent: true,
                }
            })
            .collect();
        if k == PHASE5_NAMES.len() - 1 {
            let n = rng.gen_range(150..250);
            turns.push(Turn {
                agent: PHASE5_EPHEMERAL.into(),
                prompt: words(&mut rng, n),
                max_tokens: 8,
                persistent: false,
                permanent: false,
            });
        }
        phases.push(runner.run_phase(name, &turns)?);
    }
    Ok(runner.finish(phases))
}

pub const ROUTING_EXPERTS: &[&str] = &[
    "bayesian-inference",
    "central-limit",
    "markov-chains",
    "monte-carlo",
    "regression",
    "hypothesis-testing",
    "time-series",
    "bootstrap",
    "causal-inference",
    "information-theory",
];

/// Priming, five routed queries to 2-3 experts each, then three repeats
/// with extra context.
fn routing10(opts: &ScenarioOptions, mode: &str, reuse: bool) -> Result<(ModeReport, Vec<Value>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut runner = Runner::new(opts, mode, reuse)?;
    let expert = |agent: &str, prompt: String| Turn {
        agent: agent.to_string(),
        prompt,
        max_tokens: 6,
        persistent: true,
        permanent: true,
    };
    let priming: Vec<Turn> = ROUTING_EXPERTS
        .iter()
        .map(|e| {
            let n = rng.gen_range(300..600);
            expert(e, words(&mut rng, n))
        })
        .collect();
    let mut phases = vec![runner.run_phase("priming", &priming)?];

    // Queries run one at a time so an expert hit twice sees its own answer.
    let mut queries = PhaseReport { phase: "queries".into(), ..Default::default() };
    for _ in 0..5 {
        let k = rng.gen_range(2..=3);
        let chosen: Vec<&str> = ROUTING_EXPERTS.choose_multiple(&mut rng, k).copied().collect();
        let n = rng.gen_range(12..30);
        let question = words(&mut rng, n);
        let turns: Vec<Turn> =
            chosen.iter().map(|e| expert(e, format!("{}{question}", runner.transcript(e)))).collect();
        merge_into(&mut queries, runner.run_phase("queries", &turns)?);
    }
    phases.push(queries);

    let repeated: Vec<&str> = ROUTING_EXPERTS.choose_multiple(&mut rng, 3).copied().collect();
    let turns: Vec<Turn> = repeated
        .iter()
        .map(|e| {
            let (c, q) = (rng.gen_range(40..80), rng.gen_range(12..30));
            expert(e, format!("{}{}{}", runner.transcript(e), words(&mut rng, c), words(&mut rng, q)))
        })
        .collect();
    phases.push(runner.run_phase("repeat", &turns)?);
    Ok(runner.finish(phases))
}

fn merge_into(acc: &mut PhaseReport, p: PhaseReport) {
    acc.turns += p.turns;
    acc.prefill_tokens += p.prefill_tokens;
    acc.reused_tokens += p.reused_tokens;
    acc.permanent_reused_tokens += p.permanent_reused_tokens;
    acc.decode_steps += p.decode_steps;
    acc.evictions += p.evictions;
    acc.reloads += p.reloads;
    acc.failures += p.failures;
    for (k, v) in p.verdicts {
        *acc.verdicts.entry(k).or_default() += v;
    }
}

pub const STAGGER_STEPS: u64 = 2;
const STAGGER_WORDS: usize = 4096;

/// Agent A starts cold; B arrives either after A finishes (sequential) or
/// a couple of steps into A's prefill (interleaved).
fn staggered(opts: &ScenarioOptions, mode: &str, interleave: bool) -> Result<(ModeReport, Vec<Value>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x57a6);
    let mut runner = Runner::new(opts, mode, true)?;
    let prompts = [("A", words(&mut rng, STAGGER_WORDS)), ("B", words(&mut rng, STAGGER_WORDS))];
    let mut requests = Vec::new();
    for (agent, prompt) in &prompts {
        let turn = Turn { agent: agent.to_string(), prompt: prompt.clone(), max_tokens: 16, persistent: true, permanent: true };
        requests.push(runner.request(&turn));
    }
    let before = runner.sched.engine().counters();
    let mut arrivals: BTreeMap<String, ArrivalReport> = BTreeMap::new();
    let mut pending: Vec<Request> = requests.into_iter().rev().collect();
    let mut step = 0u64;
    let mut events_all = Vec::new();
    loop {
        let submit_next = match pending.last() {
            Some(r) if r.agent_id == "A" => true,
            Some(_) if interleave => step >= STAGGER_STEPS,
            Some(_) => runner.sched.is_idle(),
            None => false,
        };
        if submit_next {
            let r = pending.pop().expect("checked above");
            arrivals.insert(
                r.agent_id.clone(),
                ArrivalReport {
                    agent_id: r.agent_id.clone(),
                    submitted_step: step,
                    first_token_step: 0,
                    done_step: 0,
                    steps_to_first_token: 0,
                },
            );
            runner.sched.submit(r)?;
            continue;
        }
        if runner.sched.is_idle() {
            break;
        }
        let events = runner.sched.step();
        step += 1;
        for ev in &events {
            let Some(a) = arrivals.get_mut(&ev.agent_id) else { continue };
            match ev.kind {
                EventKind::FirstToken { .. } => {
                    a.first_token_step = step;
                    a.steps_to_first_token = step - a.submitted_step;
                }
                EventKind::Done { .. } => a.done_step = step,
                _ => {}
            }
        }
        events_all.extend(events);
    }
    runner.record("staggered", &events_all);
    let chunk_order = runner
        .sched
        .work_log()
        .iter()
        .filter_map(|w| match w {
            WorkUnit::Prefill { agent_id, .. } => Some(agent_id.clone()),
            WorkUnit::Decode { .. } => None,
        })
        .collect();
    for w in runner.sched.work_log().to_vec() {
        runner.trace.push(json!({"mode": mode, "phase": "staggered", "work": w}));
    }
    let after = runner.sched.engine().counters();
    let phase = PhaseReport {
        phase: "staggered".into(),
        turns: 2,
        prefill_tokens: after.prefill_tokens - before.prefill_tokens,
        decode_steps: runner.sched.stats().decode_steps,
        ..Default::default()
    };
    let (mut report, trace) = runner.finish(vec![phase]);
    report.chunk_order = chunk_order;
    report.arrivals = arrivals.into_values().collect();
    Ok((report, trace))
}
