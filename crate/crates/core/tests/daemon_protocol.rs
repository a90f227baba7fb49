use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::thread;

use agentcache::daemon::{Address, Client, Daemon, DaemonConfig, MAX_LINE_BYTES};
use serde_json::{json, Value};

struct Running {
    addr: Address,
    handle: Option<thread::JoinHandle<()>>,
    _dir: tempfile::TempDir,
}

impl Running {
    fn start(tcp: bool) -> Running {
        let dir = tempfile::tempdir().unwrap();
        let addr = if tcp { Address::parse("127.0.0.1:0") } else { Address::Unix(dir.path().join("d.sock")) };
        let config = DaemonConfig { cache_dir: dir.path().join("cache"), chunk_tokens: 32, ..DaemonConfig::default() };
        let daemon = Daemon::bind(&addr, config).unwrap();
        let addr = daemon.local_addr().unwrap();
        let handle = thread::spawn(move || daemon.run().unwrap());
        Running { addr, handle: Some(handle), _dir: dir }
    }

    fn client(&self) -> Client {
        Client::connect(&self.addr).unwrap()
    }

    fn socket_path(&self) -> PathBuf {
        match &self.addr {
            Address::Unix(p) => p.clone(),
            Address::Tcp(_) => panic!("tcp daemon"),
        }
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            if let Ok(mut c) = Client::connect(&self.addr) {
                let _ = c.call("shutdown", json!({}));
            }
            let _ = h.join();
        }
    }
}

fn raw(path: &PathBuf) -> (UnixStream, BufReader<UnixStream>) {
    let s = UnixStream::connect(path).unwrap();
    let r = BufReader::new(s.try_clone().unwrap());
    (s, r)
}

fn read_json(r: &mut BufReader<UnixStream>) -> Value {
    let mut line = String::new();
    assert!(r.read_line(&mut line).unwrap() > 0, "connection closed");
    assert!(line.ends_with('\n'));
    serde_json::from_str(&line).unwrap()
}

#[test]
fn stats_response_echoes_id_and_pool_stats() {
    let d = Running::start(false);
    let (mut w, mut r) = raw(&d.socket_path());
    w.write_all(b"{\"id\":\"1\",\"op\":\"stats\"}\n").unwrap();
    let v = read_json(&mut r);
    assert_eq!(v["id"], "1");
    assert_eq!(v["ok"], true);
    assert_eq!(v["result"]["resident_bytes"], 0);
    assert_eq!(v["result"]["model"], "tiny");
}

#[test]
fn errors_keep_the_connection_open() {
    let d = Running::start(false);
    let (mut w, mut r) = raw(&d.socket_path());
    w.write_all(b"{not json\n").unwrap();
    let v = read_json(&mut r);
    assert_eq!((v["ok"].clone(), v["error"]["code"].clone()), (json!(false), json!("bad_json")));
    assert_eq!(v["id"], Value::Null);

    w.write_all(b"{\"id\":7,\"params\":{}}\n").unwrap();
    let v = read_json(&mut r);
    assert_eq!((v["id"].clone(), v["error"]["code"].clone()), (json!(7), json!("invalid_request")));

    w.write_all(b"{\"id\":\"x\",\"op\":\"frobnicate\"}\n").unwrap();
    let v = read_json(&mut r);
    assert_eq!((v["id"].clone(), v["error"]["code"].clone()), (json!("x"), json!("unknown_op")));

    w.write_all(b"{\"id\":\"y\",\"op\":\"submit\",\"params\":{\"agent\":\"a\"}}\n").unwrap();
    let v = read_json(&mut r);
    assert_eq!((v["id"].clone(), v["error"]["code"].clone()), (json!("y"), json!("invalid_argument")));

    w.write_all(b"\n{\"id\":\"z\",\"op\":\"stats\"}\n").unwrap();
    assert_eq!(read_json(&mut r)["ok"], true);
}

#[test]
fn oversized_line_is_rejected_and_closes() {
    let d = Running::start(false);
    let (mut w, mut r) = raw(&d.socket_path());
    let writer = thread::spawn(move || {
        let chunk = vec![b'a'; 1 << 20];
        for _ in 0..(MAX_LINE_BYTES >> 20) + 1 {
            if w.write_all(&chunk).is_err() {
                return;
            }
        }
        let _ = w.write_all(b"\n");
    });
    let v = read_json(&mut r);
    assert_eq!(v["error"]["code"], "line_too_long");
    let mut rest = Vec::new();
    let _ = r.read_to_end(&mut rest);
    assert!(rest.is_empty());
    writer.join().unwrap();
}

#[test]
fn submit_streams_events_and_match_sees_the_transcript() {
    let d = Running::start(false);
    let mut c = d.client();
    let prompt = "the quick brown fox jumps over the lazy dog";
    let resp = c
        .call("submit", json!({"request_id": "r1", "agent_id": "fox", "prompt": prompt, "max_tokens": 4}))
        .unwrap();
    assert_eq!(resp["result"]["request_id"], "r1");
    let done = c.wait_done("r1").unwrap();
    assert_eq!(done["id"], resp["id"]);
    assert_eq!(done["event"]["generated"], 4);
    assert_eq!(done["event"]["verdict"], "DIVERGE");

    let kinds: Vec<&str> = c.events.iter().map(|e| e["event"]["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["FirstToken", "Token", "Token", "Token", "Done"]);
    let transcript: String = prompt.to_string()
        + &c.events.iter().filter_map(|e| e["event"]["text"].as_str()).collect::<String>();

    let m = c.call("match", json!({"agent": "fox", "prompt": transcript})).unwrap();
    assert_eq!(m["result"]["verdict"], "EXACT");
    let m = c.call("match", json!({"agent": "fox", "prompt": transcript.clone() + " more"})).unwrap();
    assert_eq!(m["result"]["verdict"], "EXTEND");
    assert_eq!(m["result"]["suffix_text"], " more");
    let m = c.call("match", json!({"agent": "nobody", "prompt": "x"})).unwrap();
    assert_eq!(m["result"]["verdict"], "DIVERGE");

    let saved = c.call("save_all", json!({})).unwrap();
    assert_eq!(saved["result"]["events"][0]["kind"], "CacheSaved");
    let dropped = c.call("drop", json!({"agent": "fox", "delete_disk": true})).unwrap();
    assert_eq!(dropped["ok"], true);
    let again = c.call("drop", json!({"agent": "fox"})).unwrap();
    assert_eq!(again["error"]["code"], "not_found");
}

#[test]
fn manual_stepping_returns_events_inline() {
    let dir = tempfile::tempdir().unwrap();
    let addr = Address::Unix(dir.path().join("m.sock"));
    let config = DaemonConfig { cache_dir: dir.path().join("c"), auto_run: false, ..DaemonConfig::default() };
    let daemon = Daemon::bind(&addr, config).unwrap();
    let h = thread::spawn(move || daemon.run().unwrap());
    let mut c = Client::connect(&addr).unwrap();
    c.call("submit", json!({"request_id": "m1", "agent": "a", "prompt": "one two", "max_tokens": 2})).unwrap();
    let s = c.call("step", json!({})).unwrap();
    assert_eq!(s["result"]["events"], json!([]));
    let r = c.call("run", json!({})).unwrap();
    let kinds: Vec<&str> = r["result"]["events"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["FirstToken", "Token", "Done"]);
    let stats = c.call("stats", json!({})).unwrap();
    assert_eq!(stats["result"]["scheduler"]["completed"], 1);
    assert_eq!(stats["result"]["engine"]["decode_steps"], 2);
    c.call("shutdown", json!({})).unwrap();
    h.join().unwrap();
    assert!(!dir.path().join("m.sock").exists());
}

#[test]
fn every_request_gets_one_response_across_clients() {
    let d = Running::start(false);
    let path = d.socket_path();
    let workers: Vec<_> = (0..4)
        .map(|w| {
            let path = path.clone();
            thread::spawn(move || {
                let (mut s, mut r) = raw(&path);
                let mut sent = BTreeSet::new();
                let mut batch = String::new();
                for i in 0..30 {
                    let id = format!("w{w}-{i}");
                    let line = match i % 3 {
                        0 => json!({"id": id, "op": "stats"}),
                        1 => json!({"id": id, "op": "match", "params": {"agent": format!("g{w}"), "prompt": "hi"}}),
                        _ => json!({"id": id, "op": "submit", "params": {
                            "request_id": id, "agent": format!("g{w}-{i}"), "prompt": "a b c", "max_tokens": 1}}),
                    };
                    batch.push_str(&line.to_string());
                    batch.push('\n');
                    sent.insert(id);
                }
                s.write_all(batch.as_bytes()).unwrap();
                let mut responses = Vec::new();
                let mut dones = 0;
                while responses.len() < sent.len() || dones < 10 {
                    let v = read_json(&mut r);
                    if v.get("event").is_some() {
                        dones += usize::from(v["event"]["kind"] == "Done");
                        continue;
                    }
                    assert_eq!(v["ok"], true, "{v}");
                    responses.push(v["id"].as_str().unwrap().to_string());
                }
                let got: BTreeSet<String> = responses.iter().cloned().collect();
                assert_eq!(got.len(), responses.len(), "duplicate response");
                assert_eq!(got, sent);
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
}

#[test]
fn tcp_loopback_and_capacity() {
    let d = Running::start(true);
    assert!(matches!(d.addr, Address::Tcp(_)));
    let mut c = d.client();
    let v = c
        .call("capacity", json!({"model": "gemma3-12b", "budget": "10.2GB", "contexts": "8k"}))
        .unwrap();
    let row = &v["result"]["rows"][0];
    assert_eq!((row["fp16_agents_fit"].clone(), row["q4_agents_fit"].clone()), (json!(3), json!(12)));
}
