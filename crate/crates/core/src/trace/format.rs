//! On-disk trace format.
//!
//! A trace named `t` is a pair of files:
//!
//! - `t.manifest.json`: UTF-8 JSON manifest (geometry, lengths, tensor table,
//!   payload size and CRC32, optional annotations).
//! - `t.bin`: the three tensors `q`, `k`, `v` as little-endian IEEE-754
//!   binary32 values, row-major, at the byte offsets given in the manifest.
//!
//! Manifest example:
//!
//! ```json
//! {
//!   "format": "louiskv-trace",
//!   "version": 1,
//!   "geometry": {"num_layers": 2, "num_q_heads": 4, "num_kv_heads": 2, "head_dim": 8},
//!   "prompt_len": 64,
//!   "gen_len": 32,
//!   "dtype": "f32le",
//!   "payload": {"file": "t.bin", "bytes": 36864, "crc32": 305419896},
//!   "tensors": [
//!     {"name": "q", "shape": [2, 32, 4, 8], "offset": 0, "bytes": 8192},
//!     {"name": "k", "shape": [2, 96, 2, 8], "offset": 8192, "bytes": 12288},
//!     {"name": "v", "shape": [2, 96, 2, 8], "offset": 20480, "bytes": 12288}
//!   ],
//!   "annotations": {"segment_starts": [1, 17]}
//! }
//! ```

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate_trace, Annotations, Tensor4, Trace};
use crate::error::TraceError;
use crate::numeric::{Geometry, Real};

pub const FORMAT_NAME: &str = "louiskv-trace";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";
const TENSOR_NAMES: [&str; 3] = ["q", "k", "v"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadEntry {
    pub file: String,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [u64; 4],
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub format: String,
    pub version: u32,
    pub geometry: Geometry,
    pub prompt_len: u64,
    pub gen_len: u64,
    pub dtype: String,
    pub payload: PayloadEntry,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub annotations: Annotations,
}

impl TraceManifest {
    /// Parse and structurally check a manifest. Does not look at the payload.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let m: TraceManifest = serde_json::from_str(text).map_err(|e| TraceError::Manifest(e.to_string()))?;
        if m.format != FORMAT_NAME {
            return Err(TraceError::Manifest(format!("unknown format `{}`", m.format)));
        }
        if m.version != FORMAT_VERSION {
            return Err(TraceError::Manifest(format!("unsupported version {}", m.version)));
        }
        if m.dtype != DTYPE {
            return Err(TraceError::Manifest(format!("unsupported dtype `{}`", m.dtype)));
        }
        m.geometry.validate().map_err(|e| TraceError::Manifest(e.to_string()))?;
        if m.prompt_len == 0 {
            return Err(TraceError::Manifest("prompt_len must be >= 1".into()));
        }
        let names: Vec<&str> = m.tensors.iter().map(|t| t.name.as_str()).collect();
        if names != TENSOR_NAMES {
            return Err(TraceError::Manifest(format!(
                "tensor table must list q, k, v in order, found {names:?}"
            )));
        }
        Ok(m)
    }

    fn expected_shapes(&self) -> Result<[[u64; 4]; 3], TraceError> {
        let g = &self.geometry;
        let n = self
            .prompt_len
            .checked_add(self.gen_len)
            .ok_or_else(|| TraceError::Manifest("length overflow".into()))?;
        let (l, hq, hkv, d) = (
            g.num_layers as u64,
            g.num_q_heads as u64,
            g.num_kv_heads as u64,
            g.head_dim as u64,
        );
        Ok([[l, self.gen_len, hq, d], [l, n, hkv, d], [l, n, hkv, d]])
    }
}

fn shape_bytes(shape: &[u64; 4]) -> Option<u64> {
    shape.iter().try_fold(4u64, |acc, &x| acc.checked_mul(x))
}

pub fn manifest_path(base: &Path) -> PathBuf {
    if base.to_string_lossy().ends_with(".manifest.json") {
        return base.to_path_buf();
    }
    let mut s = base.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn payload_path(base: &Path) -> PathBuf {
    let s = base.to_string_lossy();
    let stem = s.strip_suffix(".manifest.json").unwrap_or(&s);
    PathBuf::from(format!("{stem}.bin"))
}

/// Decode a payload against an already-parsed manifest.
pub fn decode_trace(manifest: &TraceManifest, payload: &[u8]) -> Result<Trace, TraceError> {
    let actual = payload.len() as u64;
    if actual != manifest.payload.bytes {
        return Err(TraceError::PayloadSizeMismatch {
            declared: manifest.payload.bytes,
            actual,
        });
    }
    let expected = manifest.expected_shapes()?;
    let mut cursor = 0u64;
    for (entry, want) in manifest.tensors.iter().zip(&expected) {
        let mismatch = |detail: String| TraceError::HeaderPayloadMismatch {
            tensor: entry.name.clone(),
            detail,
        };
        let declared = shape_bytes(&entry.shape).ok_or_else(|| mismatch("shape overflows".into()))?;
        if declared != entry.bytes {
            return Err(mismatch(format!(
                "shape {:?} implies {declared} bytes, entry declares {}",
                entry.shape, entry.bytes
            )));
        }
        if entry.shape != *want {
            return Err(mismatch(format!(
                "has shape {:?}, geometry implies {want:?}",
                entry.shape
            )));
        }
        if entry.offset != cursor {
            return Err(mismatch(format!(
                "starts at offset {}, expected {cursor}",
                entry.offset
            )));
        }
        cursor = cursor
            .checked_add(entry.bytes)
            .ok_or_else(|| mismatch("offset overflow".into()))?;
    }
    if cursor != actual {
        return Err(TraceError::HeaderPayloadMismatch {
            tensor: "*".into(),
            detail: format!("tensors cover {cursor} bytes, payload has {actual}"),
        });
    }
    let crc = crc32fast::hash(payload);
    if crc != manifest.payload.crc32 {
        return Err(TraceError::ChecksumMismatch {
            declared: manifest.payload.crc32,
            actual: crc,
        });
    }

    let mut tensors = manifest.tensors.iter().zip(&expected).map(|(entry, shape)| {
        let start = entry.offset as usize;
        let bytes = &payload[start..start + entry.bytes as usize];
        Tensor4 {
            dims: shape.map(|x| x as usize),
            data: bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                .collect(),
        }
    });
    let (q, k, v) = (
        tensors.next().unwrap(),
        tensors.next().unwrap(),
        tensors.next().unwrap(),
    );
    let trace = Trace {
        geometry: manifest.geometry,
        prompt_len: manifest.prompt_len as usize,
        gen_len: manifest.gen_len as usize,
        q,
        k,
        v,
        annotations: manifest.annotations.clone(),
    };
    if let Some(d) = validate_trace(&trace).into_iter().next() {
        return Err(match d.location {
            Some(l) => TraceError::NonFinite {
                tensor: l.tensor.into(),
                layer: l.layer,
                index: l.index,
                head: l.head,
                dim: l.dim,
            },
            None => TraceError::Invalid(d.message),
        });
    }
    Ok(trace)
}

/// Serialize `trace` into a manifest and payload. `payload_file` is the name
/// recorded in the manifest.
pub fn encode_trace(trace: &Trace, payload_file: &str) -> (TraceManifest, Vec<u8>) {
    let mut payload = Vec::with_capacity(4 * (trace.q.data.len() + trace.k.data.len() + trace.v.data.len()));
    let mut tensors = Vec::with_capacity(3);
    for (name, t) in TENSOR_NAMES.iter().zip([&trace.q, &trace.k, &trace.v]) {
        let offset = payload.len() as u64;
        for x in &t.data {
            payload.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: (*name).into(),
            shape: t.dims.map(|x| x as u64),
            offset,
            bytes: payload.len() as u64 - offset,
        });
    }
    let manifest = TraceManifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        geometry: trace.geometry,
        prompt_len: trace.prompt_len as u64,
        gen_len: trace.gen_len as u64,
        dtype: DTYPE.into(),
        payload: PayloadEntry {
            file: payload_file.into(),
            bytes: payload.len() as u64,
            crc32: crc32fast::hash(&payload),
        },
        tensors,
        annotations: trace.annotations.clone(),
    };
    (manifest, payload)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Write `<base>.manifest.json` and `<base>.bin`.
pub fn write_trace(trace: &Trace, base: &Path) -> Result<(PathBuf, PathBuf), TraceError> {
    let mpath = manifest_path(base);
    let ppath = payload_path(base);
    let file_name = ppath
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (manifest, payload) = encode_trace(trace, &file_name);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| TraceError::Manifest(e.to_string()))?;
    text.push('\n');
    write_atomic(&ppath, &payload)?;
    write_atomic(&mpath, text.as_bytes())?;
    Ok((mpath, ppath))
}

fn read_file(path: &Path) -> Result<Vec<u8>, TraceError> {
    fs::read(path).map_err(|source| match source.kind() {
        ErrorKind::NotFound => TraceError::MissingFile(path.to_path_buf()),
        _ => TraceError::Io {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Load a trace given its base name (`t`) or manifest path (`t.manifest.json`).
pub fn load_trace(path: &Path) -> Result<Trace, TraceError> {
    let mpath = manifest_path(path);
    let text = read_file(&mpath)?;
    let text = std::str::from_utf8(&text).map_err(|_| TraceError::Manifest("manifest is not UTF-8".into()))?;
    let manifest = TraceManifest::parse(text)?;
    let payload_name = Path::new(&manifest.payload.file);
    if payload_name.components().count() != 1 {
        return Err(TraceError::Manifest("payload file must be a plain file name".into()));
    }
    let ppath = mpath
        .parent()
        .map(|d| d.join(payload_name))
        .unwrap_or_else(|| payload_name.to_path_buf());
    let payload = read_file(&ppath)?;
    decode_trace(&manifest, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_trace, SyntheticSpec};

    fn trace() -> Trace {
        generate_trace(&SyntheticSpec {
            prompt_len: 24,
            gen_len: 8,
            segment_lengths: vec![3, 5],
            key_cluster_count: 3,
            geometry: Geometry::new(2, 4, 2, 4).unwrap(),
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("t1");
        let t = trace();
        let (m, p) = write_trace(&t, &base).unwrap();
        assert!(m.ends_with("t1.manifest.json") && p.ends_with("t1.bin"));
        assert_eq!(load_trace(&base).unwrap(), t);
        assert_eq!(load_trace(&m).unwrap(), t);
    }

    #[test]
    fn truncated_payload() {
        let (m, mut p) = encode_trace(&trace(), "x.bin");
        p.pop();
        let err = decode_trace(&m, &p).unwrap_err();
        assert!(matches!(err, TraceError::PayloadSizeMismatch { .. }));
        assert!(err.to_string().starts_with("payload size mismatch"));
    }

    #[test]
    fn header_dim_disagrees_with_vectors() {
        // Encode with 3-float vectors, then claim head_dim = 4 in the header.
        let t = generate_trace(&SyntheticSpec {
            prompt_len: 8,
            gen_len: 2,
            segment_lengths: vec![2],
            key_cluster_count: 2,
            geometry: Geometry::new(1, 2, 1, 3).unwrap(),
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (mut m, p) = encode_trace(&t, "x.bin");
        m.geometry.head_dim = 4;
        let err = decode_trace(&m, &p).unwrap_err();
        assert!(matches!(err, TraceError::HeaderPayloadMismatch { .. }), "{err}");
        assert!(err.to_string().starts_with("header/payload size mismatch"));
    }

    #[test]
    fn nan_payload_and_checksum() {
        let mut t = trace();
        t.v.row_mut(1, 2, 1)[3] = Real::NAN;
        let (m, p) = encode_trace(&t, "x.bin");
        let err = decode_trace(&m, &p).unwrap_err();
        assert!(
            matches!(err, TraceError::NonFinite { ref tensor, layer: 1, index: 2, head: 1, dim: 3 } if tensor == "v"),
            "{err}"
        );

        let (m, mut p) = encode_trace(&trace(), "x.bin");
        p[0] ^= 1;
        assert!(matches!(decode_trace(&m, &p), Err(TraceError::ChecksumMismatch { .. })));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_trace(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, TraceError::MissingFile(_)));
    }

    #[test]
    fn manifest_rejects_garbage() {
        assert!(TraceManifest::parse("").is_err());
        assert!(TraceManifest::parse("{}").is_err());
        let (m, _) = encode_trace(&trace(), "x.bin");
        let mut bad = m.clone();
        bad.tensors.swap(0, 1);
        let text = serde_json::to_string(&bad).unwrap();
        assert!(TraceManifest::parse(&text).is_err());
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(TraceManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn huge_shapes_do_not_panic() {
        let (mut m, p) = encode_trace(&trace(), "x.bin");
        m.tensors[0].shape = [u64::MAX, 2, 2, 2];
        assert!(decode_trace(&m, &p).is_err());
        m.geometry.num_layers = usize::MAX;
        assert!(decode_trace(&m, &p).is_err());
    }
}
