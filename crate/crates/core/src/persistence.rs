//! On-disk agent caches: one tensor file plus one JSON sidecar per agent.
//!
//! Tensor names follow `L{layer}_B{block}_{K|V}_{weights|scales|biases}`.
//! Weights are `U32` with shape `(heads, tokens, dim / 8)`; scales and biases
//! are `BF16` with shape `(heads, tokens, dim / group_size)`. Tail blocks keep
//! their true token count on the token axis.
//!
//! The sidecar (`{stem}.meta.json`) is the commit record. It names the tensor
//! file, which is content-addressed (`{stem}.{sha256 prefix}.safetensors`),
//! and carries its length and SHA-256. A save writes the tensor file, then
//! atomically renames the sidecar into place, then removes stale tensor
//! files. A crash at any point leaves the previous pair (or no pair) intact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use half::bf16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent_cache::{AgentCache, CacheState, KVBlock};
use crate::canonical;
use crate::error::{CacheError, Result};
use crate::model_spec::ModelCacheSpec;
use crate::quant_codec::{KvRole, QuantizedTensor};
use crate::tensor_file::{self, Dtype, TensorData, TensorInfo};

pub const FORMAT_VERSION: u32 = 1;
pub const SIDECAR_SUFFIX: &str = ".meta.json";
pub const TENSOR_SUFFIX: &str = ".safetensors";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheFilePair {
    /// Absent for empty caches.
    pub tensor_path: Option<PathBuf>,
    pub sidecar_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    agent_id: String,
    spec: ModelCacheSpec,
    fingerprint: String,
    token_ids: Vec<u32>,
    char_offsets: Vec<usize>,
    transcript_text: String,
    block_token_counts: Vec<usize>,
    tensor_file: Option<String>,
    tensor_bytes: u64,
    tensor_sha256: Option<String>,
}

/// Filesystem-safe, injective encoding of an agent id. The output never
/// contains `.`, so `{stem}.` prefixes are unambiguous.
pub fn file_stem(agent_id: &str) -> String {
    let mut out = String::with_capacity(agent_id.len());
    for b in agent_id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.is_empty() {
        out.push_str("%00");
    }
    out
}

pub fn sidecar_path(dir: &Path, agent_id: &str) -> PathBuf {
    dir.join(format!("{}{SIDECAR_SUFFIX}", file_stem(agent_id)))
}

pub fn tensor_name(layer: usize, block: usize, role: KvRole, part: &str) -> String {
    format!("L{layer}_B{block}_{}_{part}", role.tag())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Points in a save where a test can inject a crash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaveStage {
    TensorTempWritten,
    TensorRenamed,
    SidecarTempWritten,
    SidecarRenamed,
}

pub fn save_agent(cache: &AgentCache, spec: &ModelCacheSpec, dir: &Path) -> Result<CacheFilePair> {
    save_agent_with_hook(cache, spec, dir, |_| Ok(()))
}

/// [`save_agent`] with a hook called after each stage; an error from the hook
/// aborts the save at that point, as a crash would.
pub fn save_agent_with_hook(
    cache: &AgentCache,
    spec: &ModelCacheSpec,
    dir: &Path,
    mut hook: impl FnMut(SaveStage) -> Result<()>,
) -> Result<CacheFilePair> {
    cache.validate(spec)?;
    fs::create_dir_all(dir)?;
    let stem = file_stem(&cache.agent_id);

    let (tensor_file, tensor_bytes, tensor_sha256) = if cache.token_count() == 0 {
        (None, 0, None)
    } else {
        let bytes = encode_tensors(cache, spec)?;
        let digest = hex(&Sha256::digest(&bytes));
        let name = format!("{stem}.{}{TENSOR_SUFFIX}", &digest[..16]);
        let tmp = write_temp(dir, &stem, &bytes)?;
        hook(SaveStage::TensorTempWritten)?;
        fs::rename(&tmp, dir.join(&name))?;
        hook(SaveStage::TensorRenamed)?;
        (Some(name), bytes.len() as u64, Some(digest))
    };

    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        agent_id: cache.agent_id.clone(),
        spec: spec.clone(),
        fingerprint: format!("{:016x}", spec.fingerprint()),
        token_ids: cache.token_ids.clone(),
        char_offsets: cache.char_offsets.clone(),
        transcript_text: cache.transcript_text.clone(),
        block_token_counts: cache.block_token_counts(),
        tensor_file: tensor_file.clone(),
        tensor_bytes,
        tensor_sha256,
    };
    let mut json = canonical::to_canonical_string(&sidecar)
        .map_err(|e| CacheError::InvalidValue(e.to_string()))?;
    json.push('\n');
    let tmp = write_temp(dir, &stem, json.as_bytes())?;
    hook(SaveStage::SidecarTempWritten)?;
    let sidecar_path = sidecar_path(dir, &cache.agent_id);
    fs::rename(&tmp, &sidecar_path)?;
    sync_dir(dir);
    hook(SaveStage::SidecarRenamed)?;

    remove_stale(dir, &stem, tensor_file.as_deref())?;
    Ok(CacheFilePair { tensor_path: tensor_file.map(|n| dir.join(n)), sidecar_path })
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_temp(dir: &Path, stem: &str, bytes: &[u8]) -> Result<PathBuf> {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!("{stem}.tmp-{}-{n}", std::process::id()));
    let mut f = fs::File::create(&path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(path)
}

fn sync_dir(dir: &Path) {
    // Best effort: directory fsync is not supported everywhere.
    if let Ok(d) = fs::File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Removes tensor files and temp files for `stem` other than `keep`.
fn remove_stale(dir: &Path, stem: &str, keep: Option<&str>) -> Result<()> {
    let prefix = format!("{stem}.");
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        if !name.starts_with(&prefix) || Some(name) == keep {
            continue;
        }
        let rest = &name[prefix.len()..];
        if rest.starts_with("tmp-") || rest.ends_with(TENSOR_SUFFIX) {
            let _ = fs::remove_file(dir.join(name));
        }
    }
    Ok(())
}

/// Removes every file belonging to `agent_id`. Returns whether anything existed.
pub fn delete_agent_files(dir: &Path, agent_id: &str) -> Result<bool> {
    let sidecar = sidecar_path(dir, agent_id);
    let existed = sidecar.exists();
    if existed {
        fs::remove_file(&sidecar)?;
    }
    if dir.is_dir() {
        remove_stale(dir, &file_stem(agent_id), None)?;
    }
    Ok(existed)
}

fn encode_tensors(cache: &AgentCache, spec: &ModelCacheSpec) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    for block in cache.blocks.iter().flatten() {
        for (role, q) in [(KvRole::Key, &block.k), (KvRole::Value, &block.v)] {
            let (h, t) = (q.heads(), q.tokens());
            let w = q.words_per_row();
            let g = q.groups_per_row();
            tensors.insert(
                tensor_name(block.layer, block.block_index, role, "weights"),
                TensorData {
                    dtype: Dtype::U32,
                    shape: vec![h, t, w],
                    bytes: q.packed().iter().flat_map(|x| x.to_le_bytes()).collect(),
                },
            );
            for (part, vals) in [("scales", q.scales()), ("biases", q.biases())] {
                tensors.insert(
                    tensor_name(block.layer, block.block_index, role, part),
                    TensorData {
                        dtype: Dtype::BF16,
                        shape: vec![h, t, g],
                        bytes: vals.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
                    },
                );
            }
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("format".to_string(), "agentcache-q4".to_string());
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("model_id".to_string(), spec.model_id().to_string());
    meta.insert("group_size".to_string(), spec.group_size().to_string());
    meta.insert("block_tokens".to_string(), spec.block_tokens().to_string());
    tensor_file::write_container(&tensors, &meta)
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CacheError::NotFound(format!("{}", path.display())))
        }
        Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
            return Err(CacheError::CorruptFile(format!("{}: not UTF-8", path.display())))
        }
        Err(e) => return Err(e.into()),
    };
    if !text.ends_with('\n') {
        return Err(CacheError::CorruptFile(format!("sidecar {}: truncated", path.display())));
    }
    serde_json::from_str(&text)
        .map_err(|e| CacheError::CorruptFile(format!("sidecar {}: {e}", path.display())))
}

/// Finds the committed file pair for `agent_id`, if any.
pub fn locate(dir: &Path, agent_id: &str) -> Result<Option<CacheFilePair>> {
    let path = sidecar_path(dir, agent_id);
    let sidecar = match read_sidecar(&path) {
        Ok(s) => s,
        Err(CacheError::NotFound(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some(CacheFilePair {
        tensor_path: sidecar.tensor_file.map(|n| dir.join(n)),
        sidecar_path: path,
    }))
}

/// Ids of all agents with a committed sidecar in `dir`, sorted. Unreadable
/// sidecars are skipped.
pub fn stored_agents(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_sidecar = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(SIDECAR_SUFFIX));
        if is_sidecar {
            if let Ok(s) = read_sidecar(&path) {
                ids.push(s.agent_id);
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Reads the resident byte cost recorded in a sidecar without touching tensor data.
pub fn stored_footprint(pair: &CacheFilePair) -> Result<(usize, u64)> {
    let s = read_sidecar(&pair.sidecar_path)?;
    let tokens = s.token_ids.len();
    let per_layer = crate::quant_codec::q4_layer_bytes(&s.spec, tokens);
    Ok((tokens, per_layer * s.spec.num_layers() as u64))
}

pub fn load_agent(pair: &CacheFilePair, expected_fingerprint: u64) -> Result<AgentCache> {
    let corrupt = |m: String| CacheError::CorruptFile(m);
    let s = read_sidecar(&pair.sidecar_path)?;
    if s.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format_version {}", s.format_version)));
    }
    let spec = &s.spec;
    if s.fingerprint != format!("{:016x}", spec.fingerprint()) {
        return Err(corrupt("sidecar fingerprint does not match its spec".into()));
    }
    if spec.fingerprint() != expected_fingerprint {
        return Err(CacheError::SpecMismatch {
            expected: expected_fingerprint,
            found: spec.fingerprint(),
        });
    }
    let t = s.token_ids.len();
    let bt = spec.block_tokens();
    let expected_counts: Vec<usize> =
        (0..t.div_ceil(bt)).map(|b| (t - b * bt).min(bt)).collect();
    if s.block_token_counts != expected_counts {
        return Err(corrupt(format!(
            "block token counts {:?} do not partition {t} tokens",
            s.block_token_counts
        )));
    }

    let mut cache = AgentCache {
        agent_id: s.agent_id.clone(),
        spec_fingerprint: spec.fingerprint(),
        blocks: vec![Vec::new(); spec.num_layers()],
        transcript_text: s.transcript_text.clone(),
        token_ids: s.token_ids.clone(),
        char_offsets: s.char_offsets.clone(),
        last_touched: 0,
        state: CacheState::Hot,
    };

    match (&s.tensor_file, t) {
        (None, 0) => {}
        (Some(name), _) if t > 0 => {
            let path = pair.sidecar_path.parent().unwrap_or(Path::new(".")).join(name);
            if let Some(p) = &pair.tensor_path {
                if p.file_name() != path.file_name() {
                    return Err(corrupt(format!("sidecar names {name}, caller gave {}", p.display())));
                }
            }
            let bytes = fs::read(&path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
            if bytes.len() as u64 != s.tensor_bytes {
                return Err(corrupt(format!(
                    "{} is {} bytes, sidecar records {}",
                    path.display(),
                    bytes.len(),
                    s.tensor_bytes
                )));
            }
            if Some(hex(&Sha256::digest(&bytes))) != s.tensor_sha256 {
                return Err(corrupt(format!("{} checksum mismatch", path.display())));
            }
            decode_blocks(&bytes, spec, &s.block_token_counts, &mut cache)?;
        }
        _ => return Err(corrupt("tensor file presence disagrees with token count".into())),
    }
    cache
        .validate(spec)
        .map_err(|e| corrupt(format!("loaded cache is inconsistent: {e}")))?;
    Ok(cache)
}

fn decode_blocks(
    bytes: &[u8],
    spec: &ModelCacheSpec,
    counts: &[usize],
    cache: &mut AgentCache,
) -> Result<()> {
    let corrupt = |m: String| CacheError::CorruptFile(m);
    let (header, data) = tensor_file::read_container(bytes)?;
    let index: BTreeMap<&str, &TensorInfo> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let expected_tensors = spec.num_layers() * counts.len() * 6;
    if index.len() != expected_tensors {
        return Err(corrupt(format!(
            "file holds {} tensors, expected {expected_tensors}",
            index.len()
        )));
    }
    let h = spec.num_kv_heads();
    let g = spec.group_size();
    for layer in 0..spec.num_layers() {
        for (b, &n) in counts.iter().enumerate() {
            let mut parts = Vec::with_capacity(2);
            for role in [KvRole::Key, KvRole::Value] {
                let dim = role.head_dim(spec);
                let fetch = |part: &str, dtype: Dtype, last: usize| -> Result<&[u8]> {
                    let name = tensor_name(layer, b, role, part);
                    let info = index
                        .get(name.as_str())
                        .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
                    if info.dtype != dtype || info.shape != [h, n, last] {
                        return Err(corrupt(format!(
                            "tensor {name}: {} {:?}, expected {} {:?}",
                            info.dtype.as_str(),
                            info.shape,
                            dtype.as_str(),
                            [h, n, last]
                        )));
                    }
                    Ok(&data[info.data_offsets.0..info.data_offsets.1])
                };
                let packed = fetch("weights", Dtype::U32, dim / 8)?
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                let to_bf16 = |raw: &[u8]| -> Vec<bf16> {
                    raw.chunks_exact(2)
                        .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                        .collect()
                };
                let scales = to_bf16(fetch("scales", Dtype::BF16, dim / g)?);
                let biases = to_bf16(fetch("biases", Dtype::BF16, dim / g)?);
                if scales.iter().any(|s| !s.is_finite() || s.to_f32() <= 0.0)
                    || biases.iter().any(|b| !b.is_finite())
                {
                    return Err(corrupt(format!("L{layer}_B{b}: non-finite or non-positive scale")));
                }
                parts.push(QuantizedTensor::from_parts(h, n, dim, g, packed, scales, biases)?);
            }
            let v = parts.pop().expect("two parts");
            let k = parts.pop().expect("two parts");
            cache.blocks[layer].push(KVBlock { layer, block_index: b, k, v });
        }
    }
    Ok(())
}

/// Header-only view of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct HeaderSummary {
    pub tensors: Vec<TensorInfo>,
    pub metadata: BTreeMap<String, String>,
    /// 8-byte length prefix plus JSON header.
    pub header_bytes: u64,
    pub data_bytes: u64,
    pub total_bytes: u64,
}

impl HeaderSummary {
    /// Distinct `(layer, block)` pairs named in the file.
    pub fn blocks_per_layer(&self) -> BTreeMap<usize, usize> {
        let mut seen: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
        for t in &self.tensors {
            if let Some((l, b)) = parse_block_name(&t.name) {
                seen.entry(l).or_default().insert(b);
            }
        }
        seen.into_iter().map(|(l, bs)| (l, bs.len())).collect()
    }
}

fn parse_block_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix('L')?;
    let (l, rest) = rest.split_once("_B")?;
    let (b, _) = rest.split_once('_')?;
    Some((l.parse().ok()?, b.parse().ok()?))
}

/// Parses only the header of `tensor_path`.
pub fn inspect(tensor_path: &Path) -> Result<HeaderSummary> {
    let header = tensor_file::read_header(tensor_path)?;
    Ok(HeaderSummary {
        header_bytes: header.data_start() as u64,
        data_bytes: header.data_len as u64,
        total_bytes: header.total_len() as u64,
        metadata: header.metadata,
        tensors: header.tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent_cache::LayerKv;
    use crate::model_spec::{preset, RawSpec};
    use ndarray::Array3;

    fn small_spec() -> ModelCacheSpec {
        RawSpec { block_tokens: 16, group_size: 8, ..RawSpec::uniform("s", 2, 2, 2, 16, 8) }
            .build()
            .unwrap()
    }

    fn filled(spec: &ModelCacheSpec, agent: &str, t: usize) -> AgentCache {
        let mut c = AgentCache::empty(agent, spec);
        let kv: Vec<LayerKv> = (0..spec.num_layers())
            .map(|l| LayerKv {
                k: Array3::from_shape_fn((spec.num_kv_heads(), t, spec.k_head_dim()), |(h, i, d)| {
                    ((l * 31 + h * 17 + i * 7 + d) % 23) as f32 * 0.37 - 3.0
                }),
                v: Array3::from_shape_fn((spec.num_kv_heads(), t, spec.v_head_dim()), |(h, i, d)| {
                    ((l * 13 + h * 5 + i * 11 + d) % 19) as f32 * -0.21
                }),
            })
            .collect();
        let text: String = (0..t).map(|i| format!(" t{i}")).collect();
        let mut offs = Vec::new();
        let mut pos = 0;
        for i in 0..t {
            offs.push(pos);
            pos += format!(" t{i}").len();
        }
        c.append(spec, &kv, &(0..t as u32).collect::<Vec<_>>(), &offs, &text).unwrap();
        c
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let c = filled(&spec, "agent/1 é", 37);
        let pair = save_agent(&c, &spec, dir.path()).unwrap();
        assert!(pair.tensor_path.as_ref().unwrap().exists());
        let back = load_agent(&pair, spec.fingerprint()).unwrap();
        assert_eq!(back, c);
        assert_eq!(locate(dir.path(), "agent/1 é").unwrap(), Some(pair));
    }

    #[test]
    fn identical_caches_give_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let c = filled(&spec, "a", 20);
        let p1 = save_agent(&c, &spec, d1.path()).unwrap();
        let p2 = save_agent(&c, &spec, d2.path()).unwrap();
        let read = |p: &Option<PathBuf>| fs::read(p.as_ref().unwrap()).unwrap();
        assert_eq!(read(&p1.tensor_path), read(&p2.tensor_path));
        assert_eq!(fs::read(&p1.sidecar_path).unwrap(), fs::read(&p2.sidecar_path).unwrap());
        assert!(fs::read_to_string(&p1.sidecar_path).unwrap().ends_with("}\n"));
    }

    #[test]
    fn empty_cache_writes_sidecar_only() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let c = AgentCache::empty("e", &spec);
        let pair = save_agent(&c, &spec, dir.path()).unwrap();
        assert!(pair.tensor_path.is_none());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(load_agent(&pair, spec.fingerprint()).unwrap(), c);
    }

    #[test]
    fn wrong_fingerprint_is_spec_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let pair = save_agent(&filled(&spec, "a", 5), &spec, dir.path()).unwrap();
        let other = preset("llama31-8b").unwrap().fingerprint();
        assert!(matches!(load_agent(&pair, other), Err(CacheError::SpecMismatch { .. })));
    }

    #[test]
    fn resave_replaces_and_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let p1 = save_agent(&filled(&spec, "a", 5), &spec, dir.path()).unwrap();
        let c2 = filled(&spec, "a", 9);
        let p2 = save_agent(&c2, &spec, dir.path()).unwrap();
        assert_ne!(p1.tensor_path, p2.tensor_path);
        assert!(!p1.tensor_path.unwrap().exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
        assert_eq!(load_agent(&p2, spec.fingerprint()).unwrap(), c2);
    }

    #[test]
    fn crash_at_any_stage_leaves_a_whole_pair() {
        let spec = small_spec();
        let old = filled(&spec, "a", 5);
        let new = filled(&spec, "a", 21);
        let stages = [
            SaveStage::TensorTempWritten,
            SaveStage::TensorRenamed,
            SaveStage::SidecarTempWritten,
            SaveStage::SidecarRenamed,
        ];
        for stage in stages {
            for with_old in [false, true] {
                let dir = tempfile::tempdir().unwrap();
                if with_old {
                    save_agent(&old, &spec, dir.path()).unwrap();
                }
                let r = save_agent_with_hook(&new, &spec, dir.path(), |s| {
                    if s == stage {
                        Err(CacheError::Io(std::io::Error::other("crash")))
                    } else {
                        Ok(())
                    }
                });
                assert!(r.is_err());
                let found = locate(dir.path(), "a").unwrap();
                let loaded = found.map(|p| load_agent(&p, spec.fingerprint()).unwrap());
                let expected = match stage {
                    SaveStage::SidecarRenamed => Some(&new),
                    _ if with_old => Some(&old),
                    _ => None,
                };
                assert_eq!(loaded.as_ref(), expected, "stage {stage:?}, old {with_old}");
            }
        }
    }

    #[test]
    fn missing_tensor_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let pair = save_agent(&filled(&spec, "a", 5), &spec, dir.path()).unwrap();
        fs::remove_file(pair.tensor_path.as_ref().unwrap()).unwrap();
        assert!(matches!(load_agent(&pair, spec.fingerprint()), Err(CacheError::CorruptFile(_))));
    }

    #[test]
    fn inspect_reports_blocks_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let c = filled(&spec, "a", 20);
        let pair = save_agent(&c, &spec, dir.path()).unwrap();
        let path = pair.tensor_path.unwrap();
        let s = inspect(&path).unwrap();
        assert_eq!(s.tensors.len(), 2 * 2 * 6);
        assert_eq!(s.blocks_per_layer().values().copied().collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(s.data_bytes, crate::quant_codec::q4_bytes(&spec, 20));
        assert_eq!(s.total_bytes, fs::metadata(&path).unwrap().len());
        assert_eq!(s.metadata["format"], "agentcache-q4");

        let empty = dir.path().join("empty.safetensors");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(inspect(&empty), Err(CacheError::CorruptFile(_))));
        assert!(matches!(
            inspect(&dir.path().join("missing.safetensors")),
            Err(CacheError::CorruptFile(_))
        ));
    }

    #[test]
    fn file_stems_are_safe_and_distinct() {
        assert_eq!(file_stem("agent_1-x"), "agent_1-x");
        assert_eq!(file_stem("a.b"), "a%2Eb");
        assert_ne!(file_stem("a/b"), file_stem("a%2Fb"));
        assert!(!file_stem("../etc").contains('.'));
    }
}
