//! Minimal safetensors container: an 8-byte little-endian header length, a
//! UTF-8 JSON header, then raw little-endian tensor bytes.
//!
//! The writer renders the header with sorted keys and lays tensor data out
//! in name order, so equal inputs produce byte-identical files. The reader
//! is strict: offsets must be contiguous, sized exactly by dtype and shape,
//! and cover the data section with nothing left over.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::canonical;
use crate::error::{CacheError, Result};

/// Upper bound on a header we are willing to parse.
pub const MAX_HEADER_BYTES: u64 = 100 << 20;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    U32,
    BF16,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::U32 => "U32",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U32 => 4,
            Dtype::BF16 => 2,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "U32" => Some(Dtype::U32),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

impl TensorInfo {
    pub fn nbytes(&self) -> usize {
        self.data_offsets.1 - self.data_offsets.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    /// Sorted by data offset.
    pub tensors: Vec<TensorInfo>,
    pub metadata: BTreeMap<String, String>,
    /// Length of the JSON header, excluding the 8-byte prefix.
    pub header_len: usize,
    pub data_len: usize,
}

impl Header {
    pub fn data_start(&self) -> usize {
        8 + self.header_len
    }

    pub fn total_len(&self) -> usize {
        self.data_start() + self.data_len
    }
}

pub struct TensorData {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Serializes tensors keyed by name. Data is laid out in key order.
pub fn write_container(
    tensors: &BTreeMap<String, TensorData>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        let expected = t.shape.iter().product::<usize>() * t.dtype.size();
        if expected != t.bytes.len() {
            return Err(CacheError::ShapeError(format!(
                "tensor {name}: {} bytes for shape {:?} {}",
                t.bytes.len(),
                t.shape,
                t.dtype.as_str()
            )));
        }
        if name == METADATA_KEY {
            return Err(CacheError::InvalidArgument("reserved tensor name".into()));
        }
        header.insert(
            name.clone(),
            json!({
                "dtype": t.dtype.as_str(),
                "shape": t.shape,
                "data_offsets": [offset, offset + t.bytes.len()],
            }),
        );
        offset += t.bytes.len();
    }
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.into(), json!(metadata));
    }
    let mut header_bytes = canonical::value_to_canonical_string(&Value::Object(header)).into_bytes();
    // Pad with spaces so tensor data starts 8-byte aligned.
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors.values() {
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(CacheError::CorruptFile(msg.into()))
}

/// Parses and validates the header. `file_len` is the full file size.
pub fn parse_header(prefix: &[u8], file_len: u64) -> Result<Header> {
    if prefix.len() < 8 || file_len < 8 {
        return corrupt("file shorter than the 8-byte header length");
    }
    let n = u64::from_le_bytes(prefix[..8].try_into().expect("8 bytes"));
    if n > MAX_HEADER_BYTES {
        return corrupt(format!("header length {n} exceeds limit"));
    }
    if 8 + n > file_len || (prefix.len() as u64) < 8 + n {
        return corrupt(format!("header length {n} runs past end of file ({file_len} bytes)"));
    }
    let n = n as usize;
    let text = std::str::from_utf8(&prefix[8..8 + n])
        .or_else(|_| corrupt("header is not UTF-8"))?;
    let value: Value =
        serde_json::from_str(text).or_else(|e| corrupt(format!("header JSON: {e}")))?;
    let Value::Object(map) = value else {
        return corrupt("header is not a JSON object");
    };

    let mut tensors = Vec::with_capacity(map.len());
    let mut metadata = BTreeMap::new();
    for (name, entry) in map {
        if name == METADATA_KEY {
            let Value::Object(meta) = entry else {
                return corrupt("metadata is not an object");
            };
            for (k, v) in meta {
                let Value::String(s) = v else {
                    return corrupt(format!("metadata value for {k} is not a string"));
                };
                metadata.insert(k, s);
            }
            continue;
        }
        tensors.push(parse_entry(name, &entry)?);
    }
    tensors.sort_by_key(|t| t.data_offsets);
    let mut cursor = 0usize;
    for t in &tensors {
        if t.data_offsets.0 != cursor {
            return corrupt(format!("tensor {} does not start at offset {cursor}", t.name));
        }
        cursor = t.data_offsets.1;
    }
    let data_len = cursor;
    if (8 + n + data_len) as u64 != file_len {
        return corrupt(format!(
            "data section is {} bytes, header declares {data_len}",
            file_len as i128 - 8 - n as i128
        ));
    }
    Ok(Header { tensors, metadata, header_len: n, data_len })
}

fn parse_entry(name: String, entry: &Value) -> Result<TensorInfo> {
    let dtype = entry
        .get("dtype")
        .and_then(Value::as_str)
        .and_then(Dtype::parse)
        .map_or_else(|| corrupt(format!("tensor {name}: missing or unsupported dtype")), Ok)?;
    let shape = entry
        .get("shape")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(|d| d.as_u64().map(|d| d as usize)).collect::<Option<Vec<_>>>())
        .map_or_else(|| corrupt(format!("tensor {name}: bad shape")), Ok)?;
    let offsets = entry
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
        .map_or_else(|| corrupt(format!("tensor {name}: bad data_offsets")), Ok)?;
    if offsets.0 > offsets.1 {
        return corrupt(format!("tensor {name}: reversed data_offsets"));
    }
    let elems = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|e| e.checked_mul(dtype.size()));
    if elems != Some(offsets.1 - offsets.0) {
        return corrupt(format!(
            "tensor {name}: {} data bytes do not match shape {shape:?}",
            offsets.1 - offsets.0
        ));
    }
    Ok(TensorInfo { name, dtype, shape, data_offsets: offsets })
}

/// Parses a whole in-memory container.
pub fn read_container(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let header = parse_header(bytes, bytes.len() as u64)?;
    let data = &bytes[header.data_start()..];
    Ok((header, data))
}

/// Reads and validates only the header of a file on disk.
pub fn read_header(path: &Path) -> Result<Header> {
    let mut file = File::open(path).or_else(|e| corrupt(format!("{}: {e}", path.display())))?;
    let file_len = file.metadata()?.len();
    let mut len_buf = [0u8; 8];
    if file.read_exact(&mut len_buf).is_err() {
        return corrupt("file shorter than the 8-byte header length");
    }
    let n = u64::from_le_bytes(len_buf);
    if n > MAX_HEADER_BYTES || 8 + n > file_len {
        return corrupt(format!("header length {n} runs past end of file ({file_len} bytes)"));
    }
    let mut prefix = len_buf.to_vec();
    prefix.resize(8 + n as usize, 0);
    file.read_exact(&mut prefix[8..])?;
    parse_header(&prefix, file_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, TensorData> {
        let mut m = BTreeMap::new();
        m.insert(
            "b".into(),
            TensorData { dtype: Dtype::BF16, shape: vec![3], bytes: vec![1, 2, 3, 4, 5, 6] },
        );
        m.insert(
            "a".into(),
            TensorData { dtype: Dtype::U32, shape: vec![1, 2], bytes: vec![9; 8] },
        );
        m
    }

    #[test]
    fn writes_sorted_aligned_header() {
        let bytes = write_container(&sample(), &BTreeMap::new()).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let text = std::str::from_utf8(&bytes[8..8 + n]).unwrap().trim_end();
        assert_eq!(
            text,
            r#"{"a":{"data_offsets":[0,8],"dtype":"U32","shape":[1,2]},"b":{"data_offsets":[8,14],"dtype":"BF16","shape":[3]}}"#
        );
        assert_eq!(&bytes[8 + n..8 + n + 8], &[9; 8]);
    }

    #[test]
    fn round_trip_with_metadata() {
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), "x".into());
        let bytes = write_container(&sample(), &meta).unwrap();
        let (h, data) = read_container(&bytes).unwrap();
        assert_eq!(h.metadata, meta);
        assert_eq!(h.tensors.len(), 2);
        assert_eq!(h.tensors[1].name, "b");
        assert_eq!(&data[8..14], &[1, 2, 3, 4, 5, 6]);
        assert_eq!(h.total_len(), bytes.len());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = write_container(&sample(), &BTreeMap::new()).unwrap();
        for cut in 0..bytes.len() {
            assert!(read_container(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(read_container(&longer).is_err());
    }

    #[test]
    fn rejects_inconsistent_entries() {
        let bad_header = |h: &str| {
            let mut v = (h.len() as u64).to_le_bytes().to_vec();
            v.extend_from_slice(h.as_bytes());
            v.extend_from_slice(&[0; 4]);
            read_container(&v).map(|_| ())
        };
        assert!(bad_header(r#"{"a":{"dtype":"U32","shape":[1],"data_offsets":[0,4]}}"#).is_ok());
        assert!(bad_header(r#"{"a":{"dtype":"F64","shape":[1],"data_offsets":[0,4]}}"#).is_err());
        assert!(bad_header(r#"{"a":{"dtype":"U32","shape":[2],"data_offsets":[0,4]}}"#).is_err());
        assert!(bad_header(r#"{"a":{"dtype":"U32","shape":[1],"data_offsets":[4,0]}}"#).is_err());
        assert!(bad_header(r#"[1,2]"#).is_err());
        assert!(bad_header(r#"{"a":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]},"b":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]}}"#).is_err());
    }
}
