//! Newline-delimited JSON service over a Unix socket (or TCP loopback).
//!
//! Request:  `{"id": ..., "op": "...", "params": {...}}`
//! Response: `{"id": ..., "ok": true, "result": ...}` or
//!           `{"id": ..., "ok": false, "error": {"code": "...", "message": "..."}}`
//! Event:    `{"id": <id of the submit>, "event": {...}}`, sent unsolicited to
//!           the connection that submitted the request.
//!
//! One thread accepts, one thread per connection reads, and a single
//! scheduler thread owns the pool and engine. Connections forward parsed
//! requests to the scheduler thread over a channel.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Map, Value};
use tracing::{debug, info, warn};

use crate::agent_cache::AgentCache;
use crate::block_pool::{BlockPool, PoolConfig, DEFAULT_BUDGET_BYTES};
use crate::capacity_planner::{capacity_table, parse_budget, parse_contexts};
use crate::error::{CacheError, Result};
use crate::model_spec::preset;
use crate::persistence;
use crate::prefix_matcher::match_prompt;
use crate::scheduler::{Engine, Event, Request, Scheduler, SchedulerConfig, DEFAULT_CHUNK_TOKENS};
use crate::synthetic::SyntheticEngine;
use crate::batch_cache::DEFAULT_MAX_BATCH;

pub const MAX_LINE_BYTES: usize = 16 << 20;
pub const SOCKET_ENV: &str = "AGENTCACHE_SOCKET";
pub const DEFAULT_SOCKET: &str = "/tmp/agentcache.sock";

#[derive(Debug, Clone, PartialEq)]
pub struct DaemonConfig {
    pub model: String,
    pub budget_bytes: u64,
    pub chunk_tokens: usize,
    pub max_batch: usize,
    pub cache_dir: PathBuf,
    /// Step the scheduler whenever it has work and no request is waiting.
    pub auto_run: bool,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        DaemonConfig {
            model: "tiny".into(),
            budget_bytes: DEFAULT_BUDGET_BYTES,
            chunk_tokens: DEFAULT_CHUNK_TOKENS,
            max_batch: DEFAULT_MAX_BATCH,
            cache_dir: PathBuf::from("agentcache-data"),
            auto_run: true,
        }
    }
}

impl DaemonConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CacheError::InvalidArgument(format!("line {}: expected key=value", n + 1)));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || CacheError::InvalidArgument(format!("bad value {value:?} for {key}"));
        match key {
            "model" => self.model = value.to_string(),
            "budget" => self.budget_bytes = parse_budget(value)?,
            "chunk_size" | "chunk_tokens" => self.chunk_tokens = value.parse().map_err(|_| bad())?,
            "max_batch" => self.max_batch = value.parse().map_err(|_| bad())?,
            "cache_dir" => self.cache_dir = PathBuf::from(value),
            "auto_run" => self.auto_run = value.parse().map_err(|_| bad())?,
            _ => return Err(CacheError::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = DaemonConfig::default();
        c.apply_kv(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    pub fn build_scheduler(&self) -> Result<Scheduler<SyntheticEngine>> {
        let spec = Arc::new(preset(&self.model)?);
        let pool = BlockPool::new(
            Arc::clone(&spec),
            PoolConfig { budget_bytes: self.budget_bytes, cache_dir: self.cache_dir.clone() },
        );
        let config = SchedulerConfig { chunk_tokens: self.chunk_tokens, max_batch: self.max_batch };
        Ok(Scheduler::new(SyntheticEngine::new(spec), pool, config))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Address {
    Unix(PathBuf),
    Tcp(SocketAddr),
}

impl Address {
    /// `tcp:HOST:PORT` or a bare `HOST:PORT` selects TCP; anything else is a
    /// Unix socket path.
    pub fn parse(s: &str) -> Address {
        let tcp = s.strip_prefix("tcp:").unwrap_or(s);
        match tcp.parse::<SocketAddr>() {
            Ok(a) => Address::Tcp(a),
            Err(_) => Address::Unix(PathBuf::from(s)),
        }
    }

    /// From the environment, falling back to the default socket path.
    pub fn from_env() -> Address {
        Address::parse(&std::env::var(SOCKET_ENV).unwrap_or_else(|_| DEFAULT_SOCKET.to_string()))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Address::Unix(p) => write!(f, "{}", p.display()),
            Address::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}

enum Stream {
    Unix(UnixStream),
    Tcp(TcpStream),
}

impl Stream {
    fn connect(addr: &Address) -> io::Result<Stream> {
        Ok(match addr {
            Address::Unix(p) => Stream::Unix(UnixStream::connect(p)?),
            Address::Tcp(a) => Stream::Tcp(TcpStream::connect(a)?),
        })
    }

    fn try_clone(&self) -> io::Result<Stream> {
        Ok(match self {
            Stream::Unix(s) => Stream::Unix(s.try_clone()?),
            Stream::Tcp(s) => Stream::Tcp(s.try_clone()?),
        })
    }

    fn shutdown(&self) {
        let _ = match self {
            Stream::Unix(s) => s.shutdown(std::net::Shutdown::Both),
            Stream::Tcp(s) => s.shutdown(std::net::Shutdown::Both),
        };
    }
}

impl Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Stream::Unix(s) => s.read(buf),
            Stream::Tcp(s) => s.read(buf),
        }
    }
}

impl Write for Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Stream::Unix(s) => s.write(buf),
            Stream::Tcp(s) => s.write(buf),
        }
    }
    fn flush(&mut self) -> io::Result<()> {
        match self {
            Stream::Unix(s) => s.flush(),
            Stream::Tcp(s) => s.flush(),
        }
    }
}

enum Listener {
    Unix(UnixListener, PathBuf),
    Tcp(TcpListener),
}

impl Listener {
    fn bind(addr: &Address) -> io::Result<Listener> {
        let l = match addr {
            Address::Unix(p) => {
                // A stale socket file from a killed daemon blocks bind.
                if p.exists() && UnixStream::connect(p).is_err() {
                    std::fs::remove_file(p)?;
                }
                Listener::Unix(UnixListener::bind(p)?, p.clone())
            }
            Address::Tcp(a) => Listener::Tcp(TcpListener::bind(a)?),
        };
        match &l {
            Listener::Unix(u, _) => u.set_nonblocking(true)?,
            Listener::Tcp(t) => t.set_nonblocking(true)?,
        }
        Ok(l)
    }

    fn local_addr(&self) -> io::Result<Address> {
        Ok(match self {
            Listener::Unix(_, p) => Address::Unix(p.clone()),
            Listener::Tcp(t) => Address::Tcp(t.local_addr()?),
        })
    }

    fn accept(&self) -> io::Result<Stream> {
        match self {
            Listener::Unix(l, _) => {
                let (s, _) = l.accept()?;
                s.set_nonblocking(false)?;
                Ok(Stream::Unix(s))
            }
            Listener::Tcp(l) => {
                let (s, _) = l.accept()?;
                s.set_nonblocking(false)?;
                s.set_nodelay(true)?;
                Ok(Stream::Tcp(s))
            }
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        if let Listener::Unix(_, p) = self {
            let _ = std::fs::remove_file(p);
        }
    }
}

fn error_value(id: &Value, code: &str, message: &str) -> Value {
    json!({"id": id, "ok": false, "error": {"code": code, "message": message}})
}

fn line(v: &Value) -> String {
    let mut s = v.to_string();
    s.push('\n');
    s
}

struct Command {
    conn: u64,
    id: Value,
    op: String,
    params: Value,
    reply: Sender<String>,
}

enum LaneMsg {
    Command(Command),
    Closed(u64),
}

/// A bound, not yet running daemon.
pub struct Daemon {
    listener: Listener,
    config: DaemonConfig,
}

impl Daemon {
    pub fn bind(addr: &Address, config: DaemonConfig) -> Result<Daemon> {
        Ok(Daemon { listener: Listener::bind(addr)?, config })
    }

    pub fn local_addr(&self) -> Result<Address> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until a `shutdown` request arrives.
    pub fn run(self) -> Result<()> {
        let scheduler = self.config.build_scheduler()?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let lane = {
            let stop = Arc::clone(&stop);
            let auto_run = self.config.auto_run;
            let config = self.config.clone();
            thread::Builder::new()
                .name("scheduler".into())
                .spawn(move || scheduler_lane(scheduler, config, auto_run, rx, stop))?
        };
        info!(addr = %self.listener.local_addr()?, "daemon listening");
        let next_conn = AtomicU64::new(0);
        while !stop.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok(stream) => {
                    let conn = next_conn.fetch_add(1, Ordering::SeqCst);
                    let tx = tx.clone();
                    thread::Builder::new()
                        .name(format!("conn-{conn}"))
                        .spawn(move || connection(conn, stream, tx))?;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                Err(e) => warn!(error = %e, "accept failed"),
            }
        }
        drop(tx);
        let _ = lane.join();
        Ok(())
    }
}

pub fn serve(addr: &Address, config: DaemonConfig) -> Result<()> {
    Daemon::bind(addr, config)?.run()
}

fn connection(conn: u64, stream: Stream, lane: Sender<LaneMsg>) {
    let Ok(mut writer) = stream.try_clone() else { return };
    let (out_tx, out_rx) = mpsc::channel::<String>();
    let writer_thread = thread::spawn(move || {
        for l in out_rx {
            if writer.write_all(l.as_bytes()).and_then(|_| writer.flush()).is_err() {
                break;
            }
        }
        writer.shutdown();
    });
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = match reader.by_ref().take(MAX_LINE_BYTES as u64 + 1).read_until(b'\n', &mut buf) {
            Ok(n) => n,
            Err(_) => break,
        };
        if n == 0 {
            break;
        }
        if buf.last() != Some(&b'\n') && buf.len() > MAX_LINE_BYTES {
            let msg = format!("line exceeds {MAX_LINE_BYTES} bytes");
            let _ = out_tx.send(line(&error_value(&Value::Null, "line_too_long", &msg)));
            break;
        }
        let text = String::from_utf8_lossy(&buf);
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => {
                let _ = out_tx.send(line(&error_value(&Value::Null, "bad_json", &e.to_string())));
                continue;
            }
        };
        let id = value.get("id").cloned().unwrap_or(Value::Null);
        let Some(op) = value.get("op").and_then(Value::as_str) else {
            let _ = out_tx.send(line(&error_value(&id, "invalid_request", "missing string field \"op\"")));
            continue;
        };
        let params = value.get("params").cloned().unwrap_or_else(|| json!({}));
        let cmd = Command { conn, id, op: op.to_string(), params, reply: out_tx.clone() };
        if lane.send(LaneMsg::Command(cmd)).is_err() {
            break;
        }
    }
    let _ = lane.send(LaneMsg::Closed(conn));
    drop(out_tx);
    let _ = writer_thread.join();
}

struct Subscriber {
    conn: u64,
    wire_id: Value,
    out: Sender<String>,
}

fn scheduler_lane(
    mut sched: Scheduler<SyntheticEngine>,
    config: DaemonConfig,
    auto_run: bool,
    rx: Receiver<LaneMsg>,
    stop: Arc<AtomicBool>,
) {
    let mut subscribers: HashMap<String, Subscriber> = HashMap::new();
    loop {
        let msg = if auto_run && !sched.is_idle() {
            match rx.try_recv() {
                Ok(m) => Some(m),
                Err(TryRecvError::Empty) => None,
                Err(TryRecvError::Disconnected) => break,
            }
        } else {
            match rx.recv() {
                Ok(m) => Some(m),
                Err(_) => break,
            }
        };
        match msg {
            None => {
                let events = sched.step();
                route(&events, &mut subscribers);
            }
            Some(LaneMsg::Closed(conn)) => subscribers.retain(|_, s| s.conn != conn),
            Some(LaneMsg::Command(cmd)) => {
                let result = handle(&mut sched, &config, &cmd, &mut subscribers);
                let response = match result {
                    Ok(v) => json!({"id": cmd.id, "ok": true, "result": v}),
                    Err(e) => error_value(&cmd.id, e.code(), &e.to_string()),
                };
                let _ = cmd.reply.send(line(&response));
                if cmd.op == "shutdown" {
                    stop.store(true, Ordering::SeqCst);
                    break;
                }
            }
        }
    }
    stop.store(true, Ordering::SeqCst);
}

fn route(events: &[Event], subscribers: &mut HashMap<String, Subscriber>) {
    for ev in events {
        let Some(rid) = &ev.request_id else { continue };
        let Some(sub) = subscribers.get(rid) else { continue };
        let _ = sub.out.send(line(&json!({"id": sub.wire_id, "event": ev})));
        if matches!(ev.kind, crate::scheduler::EventKind::Done { .. }) {
            subscribers.remove(rid);
        }
    }
}

enum HandleError {
    Cache(CacheError),
    UnknownOp(String),
}

impl From<CacheError> for HandleError {
    fn from(e: CacheError) -> Self {
        HandleError::Cache(e)
    }
}

impl HandleError {
    fn code(&self) -> &'static str {
        match self {
            HandleError::Cache(e) => e.code(),
            HandleError::UnknownOp(_) => "unknown_op",
        }
    }
}

impl fmt::Display for HandleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HandleError::Cache(e) => e.fmt(f),
            HandleError::UnknownOp(op) => write!(f, "unknown op {op:?}"),
        }
    }
}

fn str_param<'a>(params: &'a Value, names: &[&str]) -> Result<&'a str> {
    names
        .iter()
        .find_map(|n| params.get(*n).and_then(Value::as_str))
        .ok_or_else(|| CacheError::InvalidArgument(format!("missing string param {:?}", names[0])))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

static AUTO_ID: AtomicU64 = AtomicU64::new(0);

fn handle(
    sched: &mut Scheduler<SyntheticEngine>,
    config: &DaemonConfig,
    cmd: &Command,
    subscribers: &mut HashMap<String, Subscriber>,
) -> std::result::Result<Value, HandleError> {
    let p = &cmd.params;
    debug!(op = %cmd.op, "request");
    let events_value = |events: Vec<Event>, subs: &mut HashMap<String, Subscriber>| {
        route(&events, subs);
        json!({ "events": events })
    };
    Ok(match cmd.op.as_str() {
        "submit" => {
            let request_id = match p.get("request_id").and_then(Value::as_str) {
                Some(r) => r.to_string(),
                None => format!("req-{}", AUTO_ID.fetch_add(1, Ordering::SeqCst)),
            };
            let request = Request {
                request_id: request_id.clone(),
                agent_id: str_param(p, &["agent_id", "agent"])?.to_string(),
                prompt: str_param(p, &["prompt"])?.to_string(),
                max_tokens: p.get("max_tokens").and_then(Value::as_u64).unwrap_or(16) as usize,
                persistent_cache_prefix: p.get("persistent_cache_prefix").and_then(Value::as_bool).unwrap_or(true),
            };
            sched.submit(request)?;
            subscribers.insert(
                request_id.clone(),
                Subscriber { conn: cmd.conn, wire_id: cmd.id.clone(), out: cmd.reply.clone() },
            );
            json!({ "request_id": request_id })
        }
        "step" => {
            let events = sched.step();
            events_value(events, subscribers)
        }
        "run" => {
            let events = sched.run_until_idle();
            events_value(events, subscribers)
        }
        "match" => {
            let agent = str_param(p, &["agent_id", "agent"])?;
            let prompt = str_param(p, &["prompt"])?;
            let block_tokens = sched.pool().spec().block_tokens();
            let m = match sched.pool_mut().checkout(agent)? {
                Some(cache) => match_prompt(&cache, prompt, block_tokens),
                None => match_prompt(&AgentCache::empty(agent, sched.pool().spec()), prompt, block_tokens),
            };
            to_value(&m)
        }
        "save_all" => {
            let events = sched.save_all();
            events_value(events, subscribers)
        }
        "restore" => {
            let agents: Vec<String> = match p.get("agents").or_else(|| p.get("agent_ids")) {
                Some(Value::Array(a)) => a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
                _ => persistence::stored_agents(&sched.pool().config().cache_dir)?,
            };
            let events = sched.restore(&agents);
            events_value(events, subscribers)
        }
        "drop" => {
            let agent = str_param(p, &["agent_id", "agent"])?;
            let delete_disk = p.get("delete_disk").and_then(Value::as_bool).unwrap_or(false);
            sched.pool_mut().drop_agent(agent, delete_disk)?;
            json!({ "dropped": agent })
        }
        "stats" => {
            let mut out = match to_value(&sched.pool().stats()) {
                Value::Object(m) => m,
                _ => Map::new(),
            };
            out.insert("scheduler".into(), to_value(&sched.stats()));
            out.insert("engine".into(), to_value(&sched.engine().counters()));
            out.insert("model".into(), json!(config.model));
            Value::Object(out)
        }
        "capacity" => {
            let model = p.get("model").and_then(Value::as_str).unwrap_or(&config.model);
            let spec = preset(model)?;
            let budget = match p.get("budget") {
                Some(Value::String(s)) => parse_budget(s)?,
                Some(v) => v.as_u64().ok_or_else(|| CacheError::InvalidArgument("bad budget".into()))?,
                None => config.budget_bytes,
            };
            let contexts = parse_contexts(p.get("contexts").and_then(Value::as_str).unwrap_or("4k,8k,16k,32k"))?;
            let block_rounded = p.get("block_rounded").and_then(Value::as_bool).unwrap_or(false);
            json!({ "model": model, "budget_bytes": budget, "rows": capacity_table(&spec, budget, &contexts, block_rounded)? })
        }
        "shutdown" => json!({ "shutdown": true }),
        other => return Err(HandleError::UnknownOp(other.to_string())),
    })
}

/// Blocking client for one connection.
pub struct Client {
    reader: BufReader<Stream>,
    writer: Stream,
    next_id: u64,
    /// Event lines received while waiting for responses.
    pub events: Vec<Value>,
}

impl Client {
    pub fn connect(addr: &Address) -> Result<Client> {
        let stream = Stream::connect(addr)?;
        let writer = stream.try_clone()?;
        Ok(Client { reader: BufReader::new(stream), writer, next_id: 0, events: Vec::new() })
    }

    /// Sends one request and waits for its response line.
    pub fn call(&mut self, op: &str, params: Value) -> Result<Value> {
        self.next_id += 1;
        let id = format!("c{}", self.next_id);
        self.send_raw(&json!({"id": id, "op": op, "params": params}).to_string())?;
        loop {
            let v = self.read_line()?;
            if v.get("event").is_some() {
                self.events.push(v);
            } else if v.get("id") == Some(&Value::String(id.clone())) {
                return Ok(v);
            }
        }
    }

    pub fn send_raw(&mut self, text: &str) -> Result<()> {
        self.writer.write_all(text.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn read_line(&mut self) -> Result<Value> {
        let mut s = String::new();
        if self.reader.read_line(&mut s)? == 0 {
            return Err(CacheError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "daemon closed the connection")));
        }
        serde_json::from_str(&s).map_err(|e| CacheError::InvalidValue(format!("bad response line: {e}")))
    }

    /// Reads lines until the `Done` event for `request_id` arrives.
    pub fn wait_done(&mut self, request_id: &str) -> Result<Value> {
        let is_done = |v: &Value| {
            v["event"]["kind"] == "Done" && v["event"]["request_id"] == request_id
        };
        if let Some(v) = self.events.iter().find(|v| is_done(v)) {
            return Ok(v.clone());
        }
        loop {
            let v = self.read_line()?;
            if v.get("event").is_some() {
                self.events.push(v.clone());
                if is_done(&v) {
                    return Ok(v);
                }
            }
        }
    }
}
