//! Query/key/value traces: in-memory layout, validation, file format and the
//! synthetic generator.

mod format;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numeric::{Geometry, Real};

pub use format::{
    decode_trace, encode_trace, load_trace, manifest_path, payload_path, write_trace, TensorEntry, TraceManifest,
    FORMAT_NAME, FORMAT_VERSION,
};
pub use synth::{generate_trace, KeyLayout, SyntheticSpec};

/// Dense row-major 4-d tensor `[outer][index][head][dim]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor4 {
    pub dims: [usize; 4],
    pub data: Vec<Real>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    #[inline]
    fn offset(&self, a: usize, b: usize, c: usize) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3]
    }

    #[inline]
    pub fn row(&self, a: usize, b: usize, c: usize) -> &[Real] {
        let o = self.offset(a, b, c);
        &self.data[o..o + self.dims[3]]
    }

    #[inline]
    pub fn row_mut(&mut self, a: usize, b: usize, c: usize) -> &mut [Real] {
        let o = self.offset(a, b, c);
        let d = self.dims[3];
        &mut self.data[o..o + d]
    }
}

/// Metadata carried alongside a trace. Generated traces record where their
/// planted decode segments begin.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Annotations {
    /// 1-based decode steps that open a planted segment.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segment_starts: Vec<usize>,
}

/// A recorded decoding episode.
///
/// `q` is `[layer][decode step][q_head][dim]` with decode step `t` (1-based)
/// stored at index `t - 1`. `k` and `v` are `[layer][position][kv_head][dim]`
/// over positions `0..prompt_len + gen_len`; the key generated at step `t`
/// lives at position `prompt_len + t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub geometry: Geometry,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub q: Tensor4,
    pub k: Tensor4,
    pub v: Tensor4,
    pub annotations: Annotations,
}

impl Trace {
    pub fn total_len(&self) -> usize {
        self.prompt_len + self.gen_len
    }

    /// Query of `q_head` at 1-based decode step `t`.
    #[inline]
    pub fn query(&self, layer: usize, t: usize, q_head: usize) -> &[Real] {
        self.q.row(layer, t - 1, q_head)
    }

    #[inline]
    pub fn key(&self, layer: usize, pos: usize, kv_head: usize) -> &[Real] {
        self.k.row(layer, pos, kv_head)
    }

    #[inline]
    pub fn value(&self, layer: usize, pos: usize, kv_head: usize) -> &[Real] {
        self.v.row(layer, pos, kv_head)
    }

    /// All query heads of `layer` at step `t`.
    pub fn queries_at(&self, layer: usize, t: usize) -> Vec<&[Real]> {
        (0..self.geometry.num_q_heads)
            .map(|h| self.query(layer, t, h))
            .collect()
    }

    /// CRC32 of the on-disk payload encoding; identifies a trace in reports.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in [&self.q, &self.k, &self.v] {
            for x in &t.data {
                h.update(&(*x as f32).to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// One validation finding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub message: String,
    pub location: Option<Location>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub tensor: &'static str,
    pub layer: usize,
    /// Decode step index (for `q`) or token position (for `k`/`v`).
    pub index: usize,
    pub head: usize,
    pub dim: usize,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.location {
            None => f.write_str(&self.message),
            Some(l) => {
                let index_name = if l.tensor == "q" { "step" } else { "position" };
                let head_name = if l.tensor == "q" { "q_head" } else { "kv_head" };
                write!(
                    f,
                    "{} at {}[layer {}, {} {}, {} {}, dim {}]",
                    self.message, l.tensor, l.layer, index_name, l.index, head_name, l.head, l.dim
                )
            }
        }
    }
}

fn diag(message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        message: message.into(),
        location: None,
    }
}

/// Check every trace invariant; an empty result means the trace is valid.
pub fn validate_trace(trace: &Trace) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let g = &trace.geometry;
    if let Err(e) = g.validate() {
        out.push(diag(e.to_string()));
        return out;
    }
    if trace.prompt_len == 0 {
        out.push(diag("prompt length must be >= 1"));
    }
    let n = trace.total_len();
    let checks: [(&'static str, &'static str, &Tensor4, [usize; 4]); 3] = [
        (
            "q",
            "query",
            &trace.q,
            [g.num_layers, trace.gen_len, g.num_q_heads, g.head_dim],
        ),
        ("k", "key", &trace.k, [g.num_layers, n, g.num_kv_heads, g.head_dim]),
        ("v", "value", &trace.v, [g.num_layers, n, g.num_kv_heads, g.head_dim]),
    ];
    let axis_names = ["layer count", "length", "head count", "head dim"];
    let mut shapes_ok = true;
    for (_, label, t, want) in &checks {
        for axis in 0..4 {
            if t.dims[axis] != want[axis] {
                let what = if axis == 1 && *label == "query" {
                    "step count"
                } else if axis == 1 {
                    "position count"
                } else {
                    axis_names[axis]
                };
                out.push(diag(format!(
                    "{label} {what} mismatch: expected {}, found {}",
                    want[axis], t.dims[axis]
                )));
                shapes_ok = false;
            }
        }
        if t.data.len() != t.dims.iter().product::<usize>() {
            out.push(diag(format!(
                "{label} data length mismatch: dims imply {}, found {}",
                t.dims.iter().product::<usize>(),
                t.data.len()
            )));
            shapes_ok = false;
        }
    }
    if !shapes_ok {
        return out;
    }
    for (name, label, t, _) in &checks {
        let [_, d1, d2, d3] = t.dims;
        for (i, x) in t.data.iter().enumerate() {
            if !x.is_finite() {
                let dim = i % d3;
                let head = (i / d3) % d2;
                let index = (i / (d3 * d2)) % d1;
                let layer = i / (d3 * d2 * d1);
                out.push(Diagnostic {
                    message: format!("non-finite {label} value"),
                    location: Some(Location {
                        tensor: name,
                        layer,
                        index,
                        head,
                        dim,
                    }),
                });
            }
        }
    }
    for &s in &trace.annotations.segment_starts {
        if s == 0 || s > trace.gen_len {
            out.push(diag(format!(
                "segment start {s} outside decode steps 1..={}",
                trace.gen_len
            )));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Trace {
        let spec = SyntheticSpec {
            prompt_len: 16,
            gen_len: 8,
            segment_lengths: vec![4, 4],
            key_cluster_count: 2,
            geometry: Geometry::new(2, 4, 2, 4).unwrap(),
            ..SyntheticSpec::default()
        };
        generate_trace(&spec).unwrap()
    }

    #[test]
    fn generated_trace_is_valid() {
        assert!(validate_trace(&small()).is_empty());
    }

    #[test]
    fn nan_is_located() {
        let mut t = small();
        t.k.row_mut(0, 3, 0)[0] = Real::NAN;
        let d = validate_trace(&t);
        assert_eq!(d.len(), 1);
        let loc = d[0].location.as_ref().unwrap();
        assert_eq!((loc.tensor, loc.layer, loc.index, loc.head), ("k", 0, 3, 0));
        assert!(d[0].to_string().contains("layer 0, position 3, kv_head 0"));
    }

    #[test]
    fn wrong_query_head_count() {
        let mut t = small();
        t.q = Tensor4::zeros([2, 8, 3, 4]);
        let d = validate_trace(&t);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.starts_with("query head count mismatch"), "{}", d[0]);
    }

    #[test]
    fn empty_prompt_rejected() {
        let mut t = small();
        t.prompt_len = 0;
        assert!(validate_trace(&t).iter().any(|d| d.message.contains("prompt length")));
    }
}
