//! Episode and comparison reports with JSON and CSV encodings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::PolicyConfig;
use crate::footprint::FootprintMethod;
use crate::numeric::Real;
use crate::pool::TransferLedger;

pub const EPISODE_SCHEMA: &str = "louiskv.episode/1";
pub const COMPARISON_SCHEMA: &str = "louiskv.comparison/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub retrieved: bool,
    /// Boundary score of the boundary layer; absent at step 1.
    pub r_t: Option<Real>,
    pub recall: Real,
    pub output_rel_error: Real,
    /// Jaccard of oracle critical sets (boundary layer, size `budget`) against
    /// the previous step.
    pub jaccard_prev: Option<Real>,
    pub fetched_bytes: u64,
    pub offloaded_bytes: u64,
    /// Largest retrieved entry count over all `(layer, kv_head)` pools.
    pub retrieved_entries_max: usize,
    /// Per-layer retrieval flags, filled in per-layer boundary mode only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layer_retrieved: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub schema: String,
    pub trace_fingerprint: String,
    pub config: PolicyConfig,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub retrieval_count: usize,
    pub boundary_steps: Vec<usize>,
    pub ledger: TransferLedger,
    pub mean_recall: Real,
    pub min_recall: Real,
    pub mean_output_rel_error: Real,
    /// Mean recall per `[layer][q_head]`; full-cache layers report 1.
    pub head_recall: Vec<Vec<Real>>,
    pub prefill_units: usize,
    pub sealed_segments: usize,
    pub mean_segment_size: Option<Real>,
    pub centroid_bytes: u64,
    pub steps: Vec<StepMetrics>,
    /// Not part of the serialized payload so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_seconds: f64,
}

fn opt(x: Option<Real>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl EpisodeReport {
    pub fn jaccard_series(&self) -> Vec<Option<Real>> {
        self.steps.iter().map(|s| s.jaccard_prev).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per step followed by one aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# schema: {EPISODE_SCHEMA}").unwrap();
        out.push_str("row,step,retrieved,r_t,recall,output_rel_error,jaccard_prev,fetched_bytes,offloaded_bytes,retrieved_entries_max\n");
        for s in &self.steps {
            writeln!(
                out,
                "step,{},{},{},{},{},{},{},{},{}",
                s.step,
                s.retrieved as u8,
                opt(s.r_t),
                s.recall,
                s.output_rel_error,
                opt(s.jaccard_prev),
                s.fetched_bytes,
                s.offloaded_bytes,
                s.retrieved_entries_max
            )
            .unwrap();
        }
        let js: Vec<Real> = self.steps.iter().filter_map(|s| s.jaccard_prev).collect();
        let mean_j = (!js.is_empty()).then(|| js.iter().sum::<Real>() / js.len() as Real);
        writeln!(
            out,
            "aggregate,{},{},,{},{},{},{},{},{}",
            self.gen_len,
            self.retrieval_count,
            self.mean_recall,
            self.mean_output_rel_error,
            opt(mean_j),
            self.ledger.fetch_bytes,
            self.ledger.offload_bytes,
            self.steps.iter().map(|s| s.retrieved_entries_max).max().unwrap_or(0)
        )
        .unwrap();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub label: String,
    pub config: PolicyConfig,
    pub mean_recall: Real,
    pub min_recall: Real,
    pub mean_output_rel_error: Real,
    pub retrieval_count: usize,
    pub fetch_bytes: u64,
    pub fetch_ops: u64,
    pub offload_bytes: u64,
    pub modeled_transfer_seconds: f64,
    pub footprint_method: FootprintMethod,
    pub footprint_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub trace_fingerprint: String,
    pub rows: Vec<PolicyRow>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# schema: {COMPARISON_SCHEMA}").unwrap();
        out.push_str("trace,policy,mean_recall,min_recall,mean_output_rel_error,retrieval_count,fetch_bytes,fetch_ops,offload_bytes,modeled_transfer_seconds,footprint_method,footprint_bytes\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.trace_fingerprint,
                r.label,
                r.mean_recall,
                r.min_recall,
                r.mean_output_rel_error,
                r.retrieval_count,
                r.fetch_bytes,
                r.fetch_ops,
                r.offload_bytes,
                r.modeled_transfer_seconds,
                r.footprint_method,
                r.footprint_bytes
            )
            .unwrap();
        }
        out
    }
}
