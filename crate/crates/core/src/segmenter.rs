//! Semantic boundary detection and the decode-side local buffer.

use std::collections::VecDeque;

use crate::cluster::{CacheUnit, UnitKind};
use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, Real};
use crate::trace::Trace;

/// Mean per-head cosine similarity between consecutive query sets.
pub fn boundary_score<A: AsRef<[Real]>, B: AsRef<[Real]>>(q_prev: &[A], q_curr: &[B]) -> Result<Real> {
    if q_prev.len() != q_curr.len() {
        return Err(Error::HeadCountMismatch {
            expected: q_prev.len(),
            actual: q_curr.len(),
        });
    }
    if q_prev.is_empty() {
        return Err(Error::HeadCountMismatch { expected: 1, actual: 0 });
    }
    let mut total = 0.0;
    for (a, b) in q_prev.iter().zip(q_curr) {
        total += cosine_similarity(a.as_ref(), b.as_ref())?.value;
    }
    Ok(total / q_prev.len() as Real)
}

/// Tracks the previous query and decides whether step `t` opens a new segment.
#[derive(Debug, Clone, Default)]
pub struct BoundaryDetector {
    prev_query: Option<Vec<Vec<Real>>>,
}

impl BoundaryDetector {
    /// Returns `(is_boundary, r_t)`; `r_t` is absent at the first observed step.
    /// Step 1 is always a boundary.
    pub fn observe<Q: AsRef<[Real]>>(&mut self, q_t: &[Q], tau: Real, t: usize) -> Result<(bool, Option<Real>)> {
        let score = match &self.prev_query {
            Some(prev) => Some(boundary_score(prev, q_t)?),
            None => None,
        };
        self.prev_query = Some(q_t.iter().map(|q| q.as_ref().to_vec()).collect());
        let boundary = t == 1 || score.is_none_or(|r| r < tau);
        Ok((boundary, score))
    }
}

/// Result of one [`SegmenterState::step_segmenter`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStep {
    pub is_boundary: bool,
    pub score: Option<Real>,
    pub sealed: Option<CacheUnit>,
}

/// Local buffer of one `(layer, kv_head)`: sealed units still on device plus
/// the open segment receiving new tokens.
#[derive(Debug, Clone)]
pub struct SegmenterState {
    pub layer: usize,
    pub kv_head: usize,
    pub detector: BoundaryDetector,
    pub open_segment_start: usize,
    pub open_len: usize,
    pub sealed_buffer: VecDeque<CacheUnit>,
    pub buffer_token_count: usize,
    pub unit_kind: UnitKind,
    next_unit_id: u64,
}

impl SegmenterState {
    /// `first_position` is the position of the first generated token; sealed
    /// units are numbered from `first_unit_id`.
    pub fn new(layer: usize, kv_head: usize, first_position: usize, first_unit_id: u64, unit_kind: UnitKind) -> Self {
        Self {
            layer,
            kv_head,
            detector: BoundaryDetector::default(),
            open_segment_start: first_position,
            open_len: 0,
            sealed_buffer: VecDeque::new(),
            buffer_token_count: 0,
            unit_kind,
            next_unit_id: first_unit_id,
        }
    }

    /// Seal the open segment (if nonempty) into a unit kept in the buffer.
    pub fn seal_open(&mut self, trace: &Trace) -> Result<Option<CacheUnit>> {
        if self.open_len == 0 {
            return Ok(None);
        }
        let positions: Vec<usize> = (self.open_segment_start..self.open_segment_start + self.open_len).collect();
        let unit = CacheUnit::from_positions(
            trace,
            self.layer,
            self.kv_head,
            self.next_unit_id,
            self.unit_kind,
            positions,
        )?;
        self.next_unit_id += 1;
        self.open_segment_start += self.open_len;
        self.open_len = 0;
        self.sealed_buffer.push_back(unit.clone());
        Ok(Some(unit))
    }

    /// Detect a boundary from `q_t` and seal the open segment when one occurs.
    pub fn step_segmenter<Q: AsRef<[Real]>>(
        &mut self,
        trace: &Trace,
        q_t: &[Q],
        tau: Real,
        t: usize,
    ) -> Result<SegmentStep> {
        let (is_boundary, score) = self.detector.observe(q_t, tau, t)?;
        let sealed = if is_boundary { self.seal_open(trace)? } else { None };
        Ok(SegmentStep {
            is_boundary,
            score,
            sealed,
        })
    }

    /// Append the next generated position to the open segment.
    pub fn append(&mut self, position: usize) {
        assert_eq!(
            position,
            self.open_segment_start + self.open_len,
            "positions must be appended in order"
        );
        self.open_len += 1;
        self.buffer_token_count += 1;
    }

    /// Remove the oldest sealed unit when the buffer holds more than `window`
    /// tokens. The open segment is never evicted.
    pub fn evict_oldest_if_full(&mut self, window: usize) -> Option<CacheUnit> {
        if self.buffer_token_count <= window {
            return None;
        }
        let unit = self.sealed_buffer.pop_front()?;
        self.buffer_token_count -= unit.size();
        Some(unit)
    }

    /// Positions currently held on device by the buffer, ascending.
    pub fn buffer_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.sealed_buffer
            .iter()
            .flat_map(|u| u.member_positions.iter().copied())
            .chain(self.open_segment_start..self.open_segment_start + self.open_len)
    }

    pub fn next_unit_id(&self) -> u64 {
        self.next_unit_id
    }
}
