use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use agentcache::block_pool::DEFAULT_BUDGET_BYTES;
use agentcache::capacity_planner::{capacity_table, context_label, parse_budget, parse_contexts, GIB};
use agentcache::daemon::{self, Address, Client, DaemonConfig};
use agentcache::model_spec::{preset, PRESET_NAMES};
use agentcache::persistence;
use agentcache::quant_codec::{dequantize_tensor, quantize_tensor};
use agentcache_cli::scenario::{self, ScenarioOptions};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Persistent 4-bit KV-cache toolkit for multi-agent inference.
#[derive(Parser)]
#[command(name = "agentcache", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Tsv,
}

#[derive(Subcommand)]
enum Command {
    /// Per-agent cache sizes and how many agents fit a budget.
    Capacity {
        #[arg(long, default_value = "gemma3-12b")]
        model: String,
        #[arg(long, default_value = "10.2GB")]
        budget: String,
        #[arg(long, default_value = "4k,8k,16k,32k")]
        contexts: String,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Add a Q4 column with the context rounded up to whole blocks.
        #[arg(long)]
        block_rounded: bool,
    },
    /// Print the header of a cache tensor file.
    Inspect { path: PathBuf },
    /// Run the cache daemon.
    Serve {
        #[command(flatten)]
        daemon: DaemonArgs,
    },
    /// Send one request to a running daemon and print the response.
    Client {
        #[arg(long, env = daemon::SOCKET_ENV, default_value = daemon::DEFAULT_SOCKET)]
        socket: String,
        #[arg(long)]
        op: String,
        /// JSON object passed as `params`.
        #[arg(long, default_value = "{}")]
        params: String,
        /// After a submit, print streamed events until the request is done.
        #[arg(long)]
        wait: bool,
    },
    /// Run a scripted multi-agent scenario in both cache modes.
    Scenario {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(scenario::SCENARIOS))]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        budget: Option<String>,
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long)]
        max_batch: Option<usize>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write an SVG bar chart.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Seconds to pause between modes (accepted for script compatibility; ignored).
        #[arg(long, default_value_t = 0)]
        cooldown: u64,
    },
    /// Quantize/dequantize throughput on random data.
    Bench {
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 64)]
        group_size: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
    },
    /// Load one stored agent and print its digests.
    Verify {
        #[arg(long)]
        cache_dir: PathBuf,
        #[arg(long)]
        agent: String,
        #[arg(long, default_value = "tiny")]
        model: String,
    },
}

#[derive(clap::Args)]
struct DaemonArgs {
    #[arg(long, env = daemon::SOCKET_ENV, default_value = daemon::DEFAULT_SOCKET)]
    socket: String,
    /// key=value file: model, budget, chunk_size, max_batch, cache_dir, auto_run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    max_batch: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Only advance the scheduler on explicit step/run requests.
    #[arg(long)]
    manual: bool,
}

fn load_config(path: Option<&Path>) -> Result<DaemonConfig> {
    match path {
        Some(p) => DaemonConfig::from_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(DaemonConfig::default()),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_capacity(model: &str, budget: &str, contexts: &str, format: Format, block_rounded: bool) -> Result<()> {
    let models: Vec<&str> = if model == "all" {
        PRESET_NAMES.iter().copied().filter(|m| *m != "tiny").collect()
    } else {
        vec![model]
    };
    let budget = parse_budget(budget)?;
    let contexts = parse_contexts(contexts)?;
    let fit = |n: Option<u64>| n.map_or("∞".to_string(), |n| n.to_string());
    let mut all = Vec::new();
    for m in models {
        let spec = preset(m)?;
        let rows = capacity_table(&spec, budget, &contexts, block_rounded)?;
        match format {
            Format::Json => all.push(json!({"model": m, "budget_bytes": budget, "rows": rows})),
            Format::Tsv => {
                let extra = if block_rounded { "\tq4_block_rounded_bytes" } else { "" };
                println!("model\tcontext\tfp16_bytes\tq4_bytes\tfp16_fit\tq4_fit{extra}");
                for r in &rows {
                    let extra = r.q4_block_rounded_bytes.map_or(String::new(), |b| format!("\t{b}"));
                    println!(
                        "{m}\t{}\t{}\t{}\t{}\t{}{extra}",
                        r.context_tokens,
                        r.fp16_bytes_per_agent,
                        r.q4_bytes_per_agent,
                        fit(r.fp16_agents_fit),
                        fit(r.q4_agents_fit)
                    );
                }
            }
            Format::Table => {
                println!("{m}  (budget {:.2} GB)", budget as f64 / GIB);
                let extra = if block_rounded { format!(" {:>12}", "Q4 (blocks)") } else { String::new() };
                println!("{:<8} {:>10} {:>10} {:>9} {:>7}{extra}", "Context", "FP16", "Q4", "FP16 fit", "Q4 fit");
                for r in &rows {
                    let extra = r
                        .q4_block_rounded_bytes
                        .map_or(String::new(), |b| format!(" {:>9.2} GB", b as f64 / GIB));
                    println!(
                        "{:<8} {:>7.2} GB {:>7.2} GB {:>9} {:>7}{extra}",
                        context_label(r.context_tokens),
                        r.fp16_bytes_per_agent as f64 / GIB,
                        r.q4_bytes_per_agent as f64 / GIB,
                        fit(r.fp16_agents_fit),
                        fit(r.q4_agents_fit)
                    );
                }
                println!();
            }
        }
    }
    if matches!(format, Format::Json) {
        let out = if all.len() == 1 { all.remove(0) } else { Value::Array(all) };
        println!("{}", serde_json::to_string_pretty(&out)?);
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let summary = persistence::inspect(path)?;
    println!("file: {}", path.display());
    println!(
        "bytes: {} total, {} header, {} data",
        summary.total_bytes, summary.header_bytes, summary.data_bytes
    );
    for (k, v) in &summary.metadata {
        println!("meta {k} = {v}");
    }
    let blocks = summary.blocks_per_layer();
    println!("layers: {}, blocks per layer: {:?}", blocks.len(), blocks.values().collect::<Vec<_>>());
    println!("tensors: {}", summary.tensors.len());
    for t in &summary.tensors {
        println!("  {:<28} {:<5} {:?} [{}, {})", t.name, t.dtype.as_str(), t.shape, t.data_offsets.0, t.data_offsets.1);
    }
    Ok(())
}

fn cmd_serve(args: DaemonArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(m) = args.model {
        config.model = m;
    }
    if let Some(b) = args.budget {
        config.budget_bytes = parse_budget(&b)?;
    }
    if let Some(c) = args.chunk {
        config.chunk_tokens = c;
    }
    if let Some(b) = args.max_batch {
        config.max_batch = b;
    }
    if let Some(d) = args.cache_dir {
        config.cache_dir = d;
    }
    if args.manual {
        config.auto_run = false;
    }
    let addr = Address::parse(&args.socket);
    let d = daemon::Daemon::bind(&addr, config)?;
    eprintln!("agentcache daemon listening on {}", d.local_addr()?);
    d.run()?;
    Ok(())
}

fn cmd_client(socket: &str, op: &str, params: &str, wait: bool) -> Result<bool> {
    let params: Value = serde_json::from_str(params).context("--params must be a JSON object")?;
    let mut client = Client::connect(&Address::parse(socket)).with_context(|| format!("connecting to {socket}"))?;
    let response = client.call(op, params)?;
    for e in client.events.drain(..) {
        println!("{e}");
    }
    println!("{response}");
    let ok = response["ok"].as_bool().unwrap_or(false);
    if ok && wait && op == "submit" {
        if let Some(rid) = response["result"]["request_id"].as_str() {
            let rid = rid.to_string();
            client.wait_done(&rid)?;
            for e in client.events.drain(..) {
                println!("{e}");
            }
        }
    }
    Ok(ok)
}

#[allow(clippy::too_many_arguments)]
fn cmd_scenario(
    name: &str,
    seed: u64,
    config: Option<&Path>,
    model: Option<String>,
    budget: Option<String>,
    chunk: Option<usize>,
    max_batch: Option<usize>,
    cache_dir: Option<PathBuf>,
    trace: Option<&Path>,
    plot: Option<&Path>,
    json_out: Option<&Path>,
) -> Result<()> {
    let base = load_config(config)?;
    let opts = ScenarioOptions {
        seed,
        model: model.unwrap_or(base.model),
        budget_bytes: match budget {
            Some(b) => parse_budget(&b)?,
            None if config.is_some() => base.budget_bytes,
            None => DEFAULT_BUDGET_BYTES,
        },
        chunk_tokens: chunk.unwrap_or(base.chunk_tokens),
        max_batch: max_batch.unwrap_or(base.max_batch),
        cache_dir,
    };
    let report = scenario::run(name, &opts)?;
    print!("{}", report.table());
    if let Some(p) = trace {
        std::fs::write(p, report.trace_jsonl()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = plot {
        std::fs::write(p, report.chart().to_svg()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = json_out {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_bench(heads: usize, tokens: usize, dim: usize, group_size: usize, iters: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = Array3::from_shape_fn((heads, tokens, dim), |_| rng.gen_range(-1.0f32..1.0));
    let elems = (heads * tokens * dim) as f64;
    let iters = iters.max(1);
    let t0 = Instant::now();
    let mut q = quantize_tensor(data.view(), group_size)?;
    for _ in 1..iters {
        q = quantize_tensor(data.view(), group_size)?;
    }
    let quant = t0.elapsed().as_secs_f64() / iters as f64;
    let t0 = Instant::now();
    let mut max_err = 0.0f32;
    for _ in 0..iters {
        let back = dequantize_tensor(&q);
        max_err = back.iter().zip(data.iter()).map(|(a, b)| (a - b).abs()).fold(max_err, f32::max);
    }
    let dequant = t0.elapsed().as_secs_f64() / iters as f64;
    println!("shape ({heads}, {tokens}, {dim}), group {group_size}, {iters} iterations");
    println!("fp16 bytes {:>12}", elems as u64 * 2);
    println!("q4 bytes   {:>12}  (ratio {:.5})", q.nbytes(), q.nbytes() as f64 / (elems * 2.0));
    println!("quantize   {:>9.3} ms  {:>8.1} Melem/s", quant * 1e3, elems / quant / 1e6);
    println!("dequantize {:>9.3} ms  {:>8.1} Melem/s", dequant * 1e3, elems / dequant / 1e6);
    println!("max abs reconstruction error {max_err:.6}");
    Ok(())
}

fn cmd_verify(cache_dir: &Path, agent: &str, model: &str) -> Result<()> {
    let spec = Arc::new(preset(model)?);
    let pair = persistence::locate(cache_dir, agent)?.with_context(|| format!("no stored cache for agent {agent:?}"))?;
    let cache = persistence::load_agent(&pair, spec.fingerprint())?;
    cache.validate(&spec)?;
    let out = json!({
        "agent_id": cache.agent_id,
        "tokens": cache.token_count(),
        "blocks": cache.block_token_counts(),
        "content_digest": hex(&cache.content_digest()),
        "blocks_digest": hex(&cache.blocks_digest()),
    });
    println!("{out}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Capacity { model, budget, contexts, format, block_rounded } => {
            cmd_capacity(&model, &budget, &contexts, format, block_rounded)?
        }
        Command::Inspect { path } => cmd_inspect(&path)?,
        Command::Serve { daemon } => cmd_serve(daemon)?,
        Command::Client { socket, op, params, wait } => return cmd_client(&socket, &op, &params, wait),
        Command::Scenario {
            name,
            seed,
            config,
            model,
            budget,
            chunk,
            max_batch,
            cache_dir,
            trace,
            plot,
            json,
            cooldown: _,
        } => cmd_scenario(
            &name,
            seed,
            config.as_deref(),
            model,
            budget,
            chunk,
            max_batch,
            cache_dir,
            trace.as_deref(),
            plot.as_deref(),
            json.as_deref(),
        )?,
        Command::Bench { heads, tokens, dim, group_size, iters } => cmd_bench(heads, tokens, dim, group_size, iters)?,
        Command::Verify { cache_dir, agent, model } => cmd_verify(&cache_dir, &agent, &model)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
