//! Prefill/decode orchestration over a trace.
//!
//! Per decode step `t`, for every layer that is not kept fully resident and
//! every KV head:
//!
//! 1. decide whether `t` is a semantic boundary and whether the policy
//!    retrieves at `t`;
//! 2. seal the open segment (decoupled management: at a boundary; paged
//!    management: when the open page is full);
//! 3. on retrieval, score every host unit against the head's query group,
//!    select under the budget and make the selection the retrieved set;
//! 4. append the new token to the local buffer and offload the oldest sealed
//!    units while the buffer exceeds the window;
//! 5. attend over sinks, retrieved units and the local buffer, and compare
//!    with exact attention over every position.

use std::sync::Arc;
use std::time::Instant;

use crate::cluster::{build_prefill_clusters, retrievable_prompt_positions, CacheUnit, UnitKind};
use crate::config::{BoundaryMode, Management, Policy, PolicyConfig};
use crate::error::{Error, Result};
use crate::footprint::{memory_footprint, FootprintMethod, FootprintParams};
use crate::metrics::{attention_weights, critical_positions, jaccard, output_rel_error};
use crate::numeric::{attention_logits, softmax_in_place, Real};
use crate::pool::{LedgerDelta, TieredPool, TransferLedger, UnitPayload};
use crate::report::{ComparisonReport, EpisodeReport, PolicyRow, StepMetrics, COMPARISON_SCHEMA, EPISODE_SCHEMA};
use crate::segmenter::{BoundaryDetector, SegmenterState};
use crate::select::{build_pages, group_scores, select_units};
use crate::trace::{validate_trace, Trace};

#[derive(Debug)]
struct HeadState {
    pool: TieredPool,
    segmenter: SegmenterState,
    retrieved: Vec<Arc<UnitPayload>>,
    retrieved_entries: usize,
}

#[derive(Debug)]
struct LayerState {
    /// Empty for layers that keep the whole cache resident.
    heads: Vec<HeadState>,
    detector: BoundaryDetector,
}

impl LayerState {
    fn is_full(&self) -> bool {
        self.heads.is_empty()
    }
}

/// Live simulation state of one episode.
#[derive(Debug)]
pub struct EngineState<'a> {
    trace: &'a Trace,
    config: PolicyConfig,
    management: Management,
    sinks: usize,
    layers: Vec<LayerState>,
    shared_detector: BoundaryDetector,
    prev_critical: Option<Vec<Vec<usize>>>,
    prefill_units: usize,
    segment_sizes: Vec<usize>,
    head_recall_sum: Vec<Vec<Real>>,
    t: usize,
}

fn check_config(trace: &Trace, config: &PolicyConfig) -> Result<()> {
    let l = trace.geometry.num_layers;
    if config.boundary_layer >= l {
        return Err(Error::ConfigMismatch(format!(
            "boundary_layer {} out of range for {l} layers",
            config.boundary_layer
        )));
    }
    if let Some(bad) = config.full_cache_layers.iter().find(|&&x| x >= l) {
        return Err(Error::ConfigMismatch(format!(
            "full-cache layer {bad} out of range for {l} layers"
        )));
    }
    if let Policy::FixedStride(0) = config.policy {
        return Err(Error::ConfigMismatch("fixed_stride needs a stride >= 1".into()));
    }
    if config.page_size == 0 || config.avg_cluster_size == 0 {
        return Err(Error::ConfigMismatch(
            "page_size and avg_cluster_size must be >= 1".into(),
        ));
    }
    Ok(())
}

/// Build prefill units, offload them, and set up decode state.
pub fn run_prefill<'a>(trace: &'a Trace, config: &PolicyConfig) -> Result<EngineState<'a>> {
    if let Some(d) = validate_trace(trace).into_iter().next() {
        return Err(crate::error::TraceError::Invalid(d.to_string()).into());
    }
    check_config(trace, config)?;
    let g = trace.geometry;
    let management = config.management();
    let sinks = config.sinks.min(trace.prompt_len);
    let mut prefill_units = 0;
    let mut layers = Vec::with_capacity(g.num_layers);
    for layer in 0..g.num_layers {
        let mut heads = Vec::new();
        if !config.is_full_cache_layer(layer) {
            for kv_head in 0..g.num_kv_heads {
                let units = match management {
                    Management::Decoupled => build_prefill_clusters(trace, layer, kv_head, config)?,
                    Management::Paged => build_pages(
                        trace,
                        layer,
                        kv_head,
                        retrievable_prompt_positions(trace.prompt_len, config.sinks),
                        config.page_size,
                        0,
                    )?,
                };
                prefill_units += units.len();
                let mut pool = TieredPool::new(g.head_dim, config.bytes_per_elem, config.bandwidth);
                let first_segment_id = units.len() as u64;
                for unit in units {
                    let payload = UnitPayload::gather(trace, layer, kv_head, &unit.member_positions);
                    pool.offload_unit(unit, Arc::new(payload))?;
                }
                let kind = match management {
                    Management::Decoupled => UnitKind::TemporalSegment,
                    Management::Paged => UnitKind::Page,
                };
                heads.push(HeadState {
                    pool,
                    segmenter: SegmenterState::new(layer, kv_head, trace.prompt_len, first_segment_id, kind),
                    retrieved: Vec::new(),
                    retrieved_entries: 0,
                });
            }
        }
        layers.push(LayerState {
            heads,
            detector: BoundaryDetector::default(),
        });
    }
    Ok(EngineState {
        trace,
        config: config.clone(),
        management,
        sinks,
        layers,
        shared_detector: BoundaryDetector::default(),
        prev_critical: None,
        prefill_units,
        segment_sizes: Vec::new(),
        head_recall_sum: vec![vec![0.0; g.num_q_heads]; g.num_layers],
        t: 0,
    })
}

impl<'a> EngineState<'a> {
    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.t
    }

    /// Summed ledger over every pool.
    pub fn ledger(&self) -> TransferLedger {
        let mut total = TransferLedger::new(self.config.bandwidth);
        for l in &self.layers {
            for h in &l.heads {
                total.absorb(h.pool.ledger());
            }
        }
        total
    }

    pub fn centroid_bytes(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| &l.heads)
            .map(|h| h.pool.centroid_bytes())
            .sum()
    }

    /// Host-resident units of one `(layer, kv_head)`; empty for full-cache layers.
    pub fn host_units(&self, layer: usize, kv_head: usize) -> Vec<&CacheUnit> {
        self.layers[layer]
            .heads
            .get(kv_head)
            .map(|h| h.pool.units().collect())
            .unwrap_or_default()
    }

    /// Local-buffer positions (sealed device segments and the open segment)
    /// of one `(layer, kv_head)`.
    pub fn buffer_positions(&self, layer: usize, kv_head: usize) -> Vec<usize> {
        self.layers[layer]
            .heads
            .get(kv_head)
            .map(|h| h.segmenter.buffer_positions().collect())
            .unwrap_or_default()
    }

    /// Entries currently held by retrieved units of one `(layer, kv_head)`.
    pub fn retrieved_entries(&self, layer: usize, kv_head: usize) -> usize {
        self.layers[layer].heads.get(kv_head).map_or(0, |h| h.retrieved_entries)
    }

    /// Positions attended at the current step for one `(layer, kv_head)`,
    /// ascending. Full-cache layers attend to everything.
    pub fn attended_positions(&self, layer: usize, kv_head: usize) -> Vec<usize> {
        let n = self.trace.prompt_len + self.t;
        match self.layers[layer].heads.get(kv_head) {
            None => (0..n).collect(),
            Some(h) => {
                let mut v: Vec<usize> = (0..self.sinks)
                    .chain(h.retrieved.iter().flat_map(|p| p.positions.iter().copied()))
                    .chain(h.segmenter.buffer_positions())
                    .collect();
                v.sort_unstable();
                v
            }
        }
    }

    fn triggers(&self, t: usize, semantic_boundary: bool) -> bool {
        match self.config.policy {
            Policy::Louiskv => semantic_boundary,
            Policy::PerTokenPages => true,
            Policy::FixedStride(k) => (t - 1).is_multiple_of(k),
            Policy::FullCache => false,
        }
    }

    /// Advance to decode step `self.step() + 1`.
    pub fn decode_step(&mut self) -> Result<StepMetrics> {
        let t = self.t + 1;
        if t > self.trace.gen_len {
            return Err(Error::ConfigMismatch(format!(
                "step {t} beyond gen_len {}",
                self.trace.gen_len
            )));
        }
        self.t = t;
        let trace = self.trace;
        let g = trace.geometry;
        let pos = trace.prompt_len + t - 1;
        let tau = self.config.tau;

        let (shared_boundary, r_t) =
            self.shared_detector
                .observe(&trace.queries_at(self.config.boundary_layer, t), tau, t)?;

        let mut fetched = 0u64;
        let mut offloaded = 0u64;
        let mut any_retrieval = false;
        let mut layer_retrieved = Vec::new();
        let per_layer = self.config.boundary_mode == BoundaryMode::PerLayer;

        for layer in 0..g.num_layers {
            if self.layers[layer].is_full() {
                if per_layer {
                    layer_retrieved.push(false);
                }
                continue;
            }
            let boundary = if per_layer {
                self.layers[layer]
                    .detector
                    .observe(&trace.queries_at(layer, t), tau, t)?
                    .0
            } else {
                shared_boundary
            };
            let retrieve = self.triggers(t, boundary);
            any_retrieval |= retrieve;
            if per_layer {
                layer_retrieved.push(retrieve);
            }
            let management = self.management;
            let page_size = self.config.page_size;
            let budget = self.config.budget;
            let window = self.config.window;
            for kv_head in 0..g.num_kv_heads {
                let head = &mut self.layers[layer].heads[kv_head];
                let seal = match management {
                    Management::Decoupled => boundary,
                    Management::Paged => head.segmenter.open_len >= page_size,
                };
                if seal {
                    if let Some(u) = head.segmenter.seal_open(trace)? {
                        self.segment_sizes.push(u.size());
                    }
                }
                if retrieve {
                    let delta = retrieve_units(head, trace, layer, kv_head, t, budget)?;
                    fetched += delta.fetch_bytes;
                }
                head.segmenter.append(pos);
                while let Some(unit) = head.segmenter.evict_oldest_if_full(window) {
                    let payload = UnitPayload::gather(trace, layer, kv_head, &unit.member_positions);
                    offloaded += head.pool.offload_unit(unit, Arc::new(payload))?.offload_bytes;
                }
            }
        }

        let (recall, output_rel_error) = self.accuracy(t)?;
        let jaccard_prev = self.locality(t)?;
        let retrieved_entries_max = self
            .layers
            .iter()
            .flat_map(|l| &l.heads)
            .map(|h| h.retrieved_entries)
            .max()
            .unwrap_or(0);
        Ok(StepMetrics {
            step: t,
            retrieved: any_retrieval,
            r_t,
            recall,
            output_rel_error,
            jaccard_prev,
            fetched_bytes: fetched,
            offloaded_bytes: offloaded,
            retrieved_entries_max,
            layer_retrieved,
        })
    }

    /// Mean recall and output error over every evaluated `(layer, q_head)`.
    fn accuracy(&mut self, t: usize) -> Result<(Real, Real)> {
        let trace = self.trace;
        let g = trace.geometry;
        let n = trace.prompt_len + t;
        let (mut recall_sum, mut err_sum, mut count) = (0.0, 0.0, 0usize);
        for layer in 0..g.num_layers {
            if self.layers[layer].is_full() {
                for h in 0..g.num_q_heads {
                    self.head_recall_sum[layer][h] += 1.0;
                }
                continue;
            }
            for kv_head in 0..g.num_kv_heads {
                let full_keys: Vec<&[Real]> = (0..n).map(|p| trace.key(layer, p, kv_head)).collect();
                let full_vals: Vec<&[Real]> = (0..n).map(|p| trace.value(layer, p, kv_head)).collect();

                // Attended rows: sinks and buffer read from the device copy
                // (the trace), retrieved units from their fetched payloads.
                let head = &self.layers[layer].heads[kv_head];
                let mut rows: Vec<(usize, &[Real], &[Real])> = (0..self.sinks)
                    .chain(head.segmenter.buffer_positions())
                    .map(|p| (p, full_keys[p], full_vals[p]))
                    .collect();
                for payload in &head.retrieved {
                    for (i, &p) in payload.positions.iter().enumerate() {
                        rows.push((p, payload.key(i), payload.value(i)));
                    }
                }
                rows.sort_unstable_by_key(|r| r.0);
                let att_keys: Vec<&[Real]> = rows.iter().map(|r| r.1).collect();
                let att_vals: Vec<&[Real]> = rows.iter().map(|r| r.2).collect();

                for qh in g.q_heads_of(kv_head) {
                    let q = trace.query(layer, t, qh);
                    let weights = attention_weights(q, &full_keys)?;
                    let exact = weighted_sum(&weights, &full_vals);
                    let recall = rows.iter().map(|r| weights[r.0]).sum::<Real>().min(1.0);
                    let err = if rows.is_empty() {
                        1.0
                    } else {
                        let mut w = attention_logits(q, att_keys.iter().copied());
                        softmax_in_place(&mut w)?;
                        output_rel_error(&weighted_sum(&w, &att_vals), &exact)
                    };
                    self.head_recall_sum[layer][qh] += recall;
                    recall_sum += recall;
                    err_sum += err;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Ok((1.0, 0.0));
        }
        Ok((recall_sum / count as Real, err_sum / count as Real))
    }

    fn locality(&mut self, t: usize) -> Result<Option<Real>> {
        let trace = self.trace;
        let g = trace.geometry;
        let layer = self.config.boundary_layer;
        let n = trace.prompt_len + t;
        let mut sets = Vec::with_capacity(g.num_q_heads);
        for qh in 0..g.num_q_heads {
            let kvh = g.kv_head_of(qh);
            let keys: Vec<&[Real]> = (0..n).map(|p| trace.key(layer, p, kvh)).collect();
            let w = attention_weights(trace.query(layer, t, qh), &keys)?;
            sets.push(critical_positions(&w, self.config.budget));
        }
        let out = self
            .prev_critical
            .as_ref()
            .map(|prev| prev.iter().zip(&sets).map(|(a, b)| jaccard(a, b)).sum::<Real>() / g.num_q_heads as Real);
        self.prev_critical = Some(sets);
        Ok(out)
    }
}

fn weighted_sum(weights: &[Real], values: &[&[Real]]) -> Vec<Real> {
    let d = values.first().map_or(0, |v| v.len());
    let mut out = vec![0.0; d];
    for (w, v) in weights.iter().zip(values) {
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += w * x);
    }
    out
}

fn retrieve_units(
    head: &mut HeadState,
    trace: &Trace,
    layer: usize,
    kv_head: usize,
    t: usize,
    budget: usize,
) -> Result<LedgerDelta> {
    let g = trace.geometry;
    let units: Vec<&CacheUnit> = head.pool.units().collect();
    let ids: Vec<u64> = if units.is_empty() {
        Vec::new()
    } else {
        let queries: Vec<&[Real]> = g.q_heads_of(kv_head).map(|qh| trace.query(layer, t, qh)).collect();
        let centroids: Vec<&[Real]> = units.iter().map(|u| u.centroid.as_slice()).collect();
        let scores = group_scores(&queries, &centroids)?;
        let sizes: Vec<usize> = units.iter().map(|u| u.size()).collect();
        select_units(&scores, &sizes, budget)
            .into_iter()
            .map(|i| units[i].unit_id)
            .collect()
    };
    let (payloads, delta) = head.pool.fetch_units(&ids)?;
    head.retrieved_entries = payloads.iter().map(|p| p.positions.len()).sum();
    head.retrieved = payloads;
    Ok(delta)
}

/// Prefill followed by every decode step.
pub fn run_episode(trace: &Trace, config: &PolicyConfig) -> Result<EpisodeReport> {
    let start = Instant::now();
    let mut state = run_prefill(trace, config)?;
    let mut steps = Vec::with_capacity(trace.gen_len);
    for _ in 0..trace.gen_len {
        steps.push(state.decode_step()?);
    }
    let g = trace.geometry;
    let m = steps.len();
    let boundary_steps: Vec<usize> = steps.iter().filter(|s| s.retrieved).map(|s| s.step).collect();
    let (mean_recall, min_recall, mean_err) = if m == 0 {
        (1.0, 1.0, 0.0)
    } else {
        (
            steps.iter().map(|s| s.recall).sum::<Real>() / m as Real,
            steps.iter().map(|s| s.recall).fold(Real::INFINITY, Real::min),
            steps.iter().map(|s| s.output_rel_error).sum::<Real>() / m as Real,
        )
    };
    let head_recall = state
        .head_recall_sum
        .iter()
        .map(|l| l.iter().map(|x| if m == 0 { 1.0 } else { x / m as Real }).collect())
        .collect();
    // Every (layer, kv_head) segments identically; report one pool's view.
    let pools = state.layers.iter().filter(|l| !l.is_full()).count() * g.num_kv_heads;
    let sealed_segments = state.segment_sizes.len().checked_div(pools).unwrap_or(0);
    let mean_segment_size = (!state.segment_sizes.is_empty())
        .then(|| state.segment_sizes.iter().sum::<usize>() as Real / state.segment_sizes.len() as Real);
    Ok(EpisodeReport {
        schema: EPISODE_SCHEMA.into(),
        trace_fingerprint: format!("{:08x}", trace.fingerprint()),
        config: config.clone(),
        prompt_len: trace.prompt_len,
        gen_len: trace.gen_len,
        retrieval_count: boundary_steps.len(),
        boundary_steps,
        ledger: state.ledger(),
        mean_recall,
        min_recall,
        mean_output_rel_error: mean_err,
        head_recall,
        prefill_units: state.prefill_units,
        sealed_segments,
        mean_segment_size,
        centroid_bytes: state.centroid_bytes(),
        steps,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Footprint model matching a policy's management scheme.
pub fn footprint_for(trace: &Trace, config: &PolicyConfig, mean_segment_size: Option<Real>) -> (FootprintMethod, f64) {
    let g = trace.geometry;
    let params = FootprintParams {
        layers: g.num_layers as u64,
        heads: g.num_kv_heads as u64,
        head_dim: g.head_dim as u64,
        n: trace.prompt_len as u64,
        m: trace.gen_len as u64,
        page_size: config.page_size as u64,
        budget: config.budget as u64,
        cluster_size: config.avg_cluster_size as f64,
        segment_size: mean_segment_size.map_or(config.avg_cluster_size as f64, |s| s),
        bytes_per_elem: config.bytes_per_elem as u64,
    };
    let method = match (config.policy, config.management()) {
        (Policy::FullCache, _) => FootprintMethod::FullCache,
        (_, Management::Paged) => FootprintMethod::Arkvale,
        (_, Management::Decoupled) => FootprintMethod::Louiskv,
    };
    (method, memory_footprint(method, &params))
}

impl ComparisonReport {
    /// Assemble rows from episode reports run on the same trace.
    pub fn from_reports(trace: &Trace, reports: &[EpisodeReport]) -> Self {
        let rows = reports
            .iter()
            .map(|r| {
                let (footprint_method, footprint_bytes) = footprint_for(trace, &r.config, r.mean_segment_size);
                PolicyRow {
                    label: r.config.policy.to_string(),
                    config: r.config.clone(),
                    mean_recall: r.mean_recall,
                    min_recall: r.min_recall,
                    mean_output_rel_error: r.mean_output_rel_error,
                    retrieval_count: r.retrieval_count,
                    fetch_bytes: r.ledger.fetch_bytes,
                    fetch_ops: r.ledger.fetch_ops,
                    offload_bytes: r.ledger.offload_bytes,
                    modeled_transfer_seconds: r.ledger.modeled_transfer_seconds,
                    footprint_method,
                    footprint_bytes,
                }
            })
            .collect();
        ComparisonReport {
            schema: COMPARISON_SCHEMA.into(),
            trace_fingerprint: format!("{:08x}", trace.fingerprint()),
            rows,
        }
    }
}

/// Run every config on `trace` and tabulate the aggregates side by side.
pub fn compare_policies(trace: &Trace, configs: &[PolicyConfig]) -> Result<ComparisonReport> {
    if configs.len() < 2 {
        return Err(Error::ConfigMismatch(
            "comparison needs at least two configurations".into(),
        ));
    }
    let reports = configs
        .iter()
        .map(|c| run_episode(trace, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport::from_reports(trace, &reports))
}
