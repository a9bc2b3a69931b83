//! Simulated two-tier memory: a host-side unit store, the device-resident
//! retrieved set, and a byte-accurate transfer ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cluster::CacheUnit;
use crate::error::{Error, Result};
use crate::numeric::Real;
use crate::trace::Trace;

/// Default host-device bandwidth: PCIe 4.0 x16, 32 GB/s.
pub const DEFAULT_BANDWIDTH: f64 = 32e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferLedger {
    pub offload_bytes: u64,
    pub fetch_bytes: u64,
    pub fetch_ops: u64,
    pub offload_ops: u64,
    pub modeled_transfer_seconds: f64,
    pub bandwidth: f64,
}

impl TransferLedger {
    pub fn new(bandwidth: f64) -> Self {
        Self {
            offload_bytes: 0,
            fetch_bytes: 0,
            fetch_ops: 0,
            offload_ops: 0,
            modeled_transfer_seconds: 0.0,
            bandwidth,
        }
    }

    fn refresh(&mut self) {
        self.modeled_transfer_seconds = (self.offload_bytes + self.fetch_bytes) as f64 / self.bandwidth;
    }

    pub fn record(&mut self, delta: LedgerDelta) {
        self.offload_bytes += delta.offload_bytes;
        self.fetch_bytes += delta.fetch_bytes;
        self.offload_ops += delta.offload_ops;
        self.fetch_ops += delta.fetch_ops;
        self.refresh();
    }

    /// Add another ledger's counters (bandwidths must agree).
    pub fn absorb(&mut self, other: &TransferLedger) {
        self.record(LedgerDelta {
            offload_bytes: other.offload_bytes,
            fetch_bytes: other.fetch_bytes,
            fetch_ops: other.fetch_ops,
            offload_ops: other.offload_ops,
        });
    }
}

impl Default for TransferLedger {
    fn default() -> Self {
        Self::new(DEFAULT_BANDWIDTH)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerDelta {
    pub offload_bytes: u64,
    pub fetch_bytes: u64,
    pub fetch_ops: u64,
    pub offload_ops: u64,
}

/// K and V rows of a unit, flattened in member order.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitPayload {
    pub positions: Vec<usize>,
    pub keys: Vec<Real>,
    pub values: Vec<Real>,
    pub head_dim: usize,
}

impl UnitPayload {
    pub fn gather(trace: &Trace, layer: usize, kv_head: usize, positions: &[usize]) -> Self {
        let d = trace.geometry.head_dim;
        let mut keys = Vec::with_capacity(positions.len() * d);
        let mut values = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            keys.extend_from_slice(trace.key(layer, p, kv_head));
            values.extend_from_slice(trace.value(layer, p, kv_head));
        }
        Self {
            positions: positions.to_vec(),
            keys,
            values,
            head_dim: d,
        }
    }

    pub fn key(&self, i: usize) -> &[Real] {
        &self.keys[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn value(&self, i: usize) -> &[Real] {
        &self.values[i * self.head_dim..(i + 1) * self.head_dim]
    }
}

#[derive(Debug, Clone)]
struct HostEntry {
    unit: CacheUnit,
    payload: Arc<UnitPayload>,
}

/// Host store and retrieved set for one `(layer, kv_head)`.
#[derive(Debug, Clone)]
pub struct TieredPool {
    head_dim: usize,
    bytes_per_elem: usize,
    host_units: BTreeMap<u64, HostEntry>,
    device_resident: BTreeSet<u64>,
    ledger: TransferLedger,
}

impl TieredPool {
    pub fn new(head_dim: usize, bytes_per_elem: usize, bandwidth: f64) -> Self {
        Self {
            head_dim,
            bytes_per_elem,
            host_units: BTreeMap::new(),
            device_resident: BTreeSet::new(),
            ledger: TransferLedger::new(bandwidth),
        }
    }

    /// Bytes moved for a unit of `size` entries: K and V, `head_dim` each.
    pub fn unit_bytes(&self, size: usize) -> u64 {
        (size * 2 * self.head_dim * self.bytes_per_elem) as u64
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    pub fn len(&self) -> usize {
        self.host_units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.host_units.is_empty()
    }

    pub fn device_resident(&self) -> &BTreeSet<u64> {
        &self.device_resident
    }

    pub fn unit(&self, id: u64) -> Option<&CacheUnit> {
        self.host_units.get(&id).map(|e| &e.unit)
    }

    /// Host-resident units in ascending id order.
    pub fn units(&self) -> impl Iterator<Item = &CacheUnit> {
        self.host_units.values().map(|e| &e.unit)
    }

    /// Device-side centroid index footprint in bytes.
    pub fn centroid_bytes(&self) -> u64 {
        (self.host_units.len() * self.head_dim * self.bytes_per_elem) as u64
    }

    pub fn offload_unit(&mut self, unit: CacheUnit, payload: Arc<UnitPayload>) -> Result<LedgerDelta> {
        if self.host_units.contains_key(&unit.unit_id) {
            return Err(Error::DuplicateUnit(unit.unit_id));
        }
        let delta = LedgerDelta {
            offload_bytes: self.unit_bytes(unit.size()),
            offload_ops: 1,
            ..LedgerDelta::default()
        };
        self.device_resident.remove(&unit.unit_id);
        self.host_units.insert(unit.unit_id, HostEntry { unit, payload });
        self.ledger.record(delta);
        Ok(delta)
    }

    /// Make exactly `ids` the retrieved set. Units already resident cost
    /// nothing; previously retrieved units outside `ids` are released.
    pub fn fetch_units(&mut self, ids: &[u64]) -> Result<(Vec<Arc<UnitPayload>>, LedgerDelta)> {
        if let Some(&bad) = ids.iter().find(|id| !self.host_units.contains_key(id)) {
            return Err(Error::UnknownUnit(bad));
        }
        let wanted: BTreeSet<u64> = ids.iter().copied().collect();
        let mut delta = LedgerDelta {
            fetch_ops: 1,
            ..LedgerDelta::default()
        };
        for id in &wanted {
            if !self.device_resident.contains(id) {
                delta.fetch_bytes += self.unit_bytes(self.host_units[id].unit.size());
            }
        }
        let payloads = wanted
            .iter()
            .map(|id| Arc::clone(&self.host_units[id].payload))
            .collect();
        self.device_resident = wanted;
        self.ledger.record(delta);
        Ok((payloads, delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::UnitKind;

    fn unit(id: u64, size: usize, d: usize) -> (CacheUnit, Arc<UnitPayload>) {
        let positions: Vec<usize> = (0..size).collect();
        let u = CacheUnit {
            unit_id: id,
            kind: UnitKind::SemanticCluster,
            kv_head: 0,
            member_positions: positions.clone(),
            centroid: vec![0.0; d],
        };
        let p = UnitPayload {
            positions,
            keys: vec![1.0; size * d],
            values: vec![2.0; size * d],
            head_dim: d,
        };
        (u, Arc::new(p))
    }

    #[test]
    fn offload_accounting() {
        let mut pool = TieredPool::new(4, 2, DEFAULT_BANDWIDTH);
        let (u, p) = unit(1, 16, 4);
        assert_eq!(pool.offload_unit(u.clone(), p.clone()).unwrap().offload_bytes, 256);
        assert!(matches!(pool.offload_unit(u, p), Err(Error::DuplicateUnit(1))));

        let mut tiny = TieredPool::new(1, 2, DEFAULT_BANDWIDTH);
        let (u, p) = unit(0, 1, 1);
        assert_eq!(tiny.offload_unit(u, p).unwrap().offload_bytes, 4);
    }

    #[test]
    fn fetch_reuse_and_replacement() {
        let mut pool = TieredPool::new(4, 2, DEFAULT_BANDWIDTH);
        for id in [0, 1] {
            let (u, p) = unit(id, 16, 4);
            pool.offload_unit(u, p).unwrap();
        }
        let (payloads, d) = pool.fetch_units(&[0]).unwrap();
        assert_eq!(d.fetch_bytes, 256);
        assert_eq!(payloads.len(), 1);
        assert_eq!(pool.fetch_units(&[0]).unwrap().1.fetch_bytes, 0);
        let (_, d) = pool.fetch_units(&[1]).unwrap();
        assert_eq!(d.fetch_bytes, 256);
        assert!(!pool.device_resident().contains(&0));
        assert!(pool.device_resident().contains(&1));
        assert!(matches!(pool.fetch_units(&[999]), Err(Error::UnknownUnit(999))));
        // a failed fetch leaves the retrieved set alone
        assert!(pool.device_resident().contains(&1));

        let l = pool.ledger();
        assert_eq!(l.fetch_ops, 3);
        assert_eq!(l.offload_ops, 2);
        assert_eq!(
            l.modeled_transfer_seconds,
            (l.offload_bytes + l.fetch_bytes) as f64 / 32e9
        );
    }

    #[test]
    fn offload_bytes_equal_later_fetch_bytes() {
        let mut pool = TieredPool::new(8, 2, DEFAULT_BANDWIDTH);
        for (id, size) in [(0, 3), (1, 17), (2, 1)] {
            let (u, p) = unit(id, size, 8);
            let off = pool.offload_unit(u, p).unwrap().offload_bytes;
            let (_, d) = pool.fetch_units(&[id]).unwrap();
            assert_eq!(off, d.fetch_bytes);
        }
    }
}
