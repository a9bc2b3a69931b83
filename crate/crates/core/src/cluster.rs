//! Cache units and k-means clustering of prompt keys.

use serde::{Deserialize, Serialize};

use crate::config::PolicyConfig;
use crate::error::{Error, Result};
use crate::numeric::{squared_distance, Real};
use crate::rng::{derive_seed, SplitMix64};
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    SemanticCluster,
    TemporalSegment,
    Page,
}

/// A retrievable group of KV entries of one KV head, indexed by the mean of
/// its keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheUnit {
    pub unit_id: u64,
    pub kind: UnitKind,
    pub kv_head: usize,
    /// Strictly increasing token positions.
    pub member_positions: Vec<usize>,
    pub centroid: Vec<Real>,
}

impl CacheUnit {
    pub fn size(&self) -> usize {
        self.member_positions.len()
    }

    /// Build a unit whose centroid is the mean of the member keys of
    /// `(layer, kv_head)` in `trace`.
    pub fn from_positions(
        trace: &Trace,
        layer: usize,
        kv_head: usize,
        unit_id: u64,
        kind: UnitKind,
        member_positions: Vec<usize>,
    ) -> Result<Self> {
        let keys: Vec<&[Real]> = member_positions.iter().map(|&p| trace.key(layer, p, kv_head)).collect();
        let centroid = compute_centroid(&keys)?;
        Ok(Self {
            unit_id,
            kind,
            kv_head,
            member_positions,
            centroid,
        })
    }
}

/// Elementwise arithmetic mean.
pub fn compute_centroid(vectors: &[&[Real]]) -> Result<Vec<Real>> {
    let first = vectors.first().ok_or(Error::EmptyVectors)?;
    let d = first.len();
    let mut sum = vec![0.0; d];
    for v in vectors {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: v.len(),
            });
        }
        sum.iter_mut().zip(v.iter()).for_each(|(s, x)| *s += x);
    }
    let n = vectors.len() as Real;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Point index -> cluster id in `0..k`.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<Real>>,
    pub iterations: usize,
    pub converged: bool,
    /// Within-cluster sum of squares after each centroid update.
    pub wcss_history: Vec<Real>,
}

fn nearest(point: &[Real], centroids: &[Vec<Real>]) -> usize {
    let mut best = 0;
    let mut best_d = Real::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn plus_plus_init(points: &[&[Real]], k: usize, rng: &mut SplitMix64) -> Vec<Vec<Real>> {
    let n = points.len();
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<Real> = points.iter().map(|p| squared_distance(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: Real = dist.iter().sum();
        let next = if total > 0.0 {
            let r = rng.next_f64() as Real * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > r {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `r` at the very end of the mass.
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // Every remaining point duplicates a chosen center.
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(squared_distance(p, points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

/// Give every empty cluster the point farthest from its current centroid,
/// taken from clusters with more than one member.
fn repair_empty(points: &[&[Real]], assignment: &mut [usize], centroids: &mut [Vec<Real>]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    assignment.iter().for_each(|&a| counts[a] += 1);
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut best: Option<(usize, Real)> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(points[i], &centroids[a]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= n guarantees a donor cluster");
        counts[assignment[i]] -= 1;
        assignment[i] = empty;
        counts[empty] = 1;
        centroids[empty] = points[i].to_vec();
    }
}

fn means(points: &[&[Real]], assignment: &[usize], k: usize) -> Vec<Vec<Real>> {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        sums[a].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        counts[a] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= c as Real);
    }
    sums
}

pub fn wcss(points: &[&[Real]], assignment: &[usize], centroids: &[Vec<Real>]) -> Real {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding, squared Euclidean distance and
/// empty-cluster repair. Stops when an iteration reassigns nothing or after
/// `max_iters` iterations (at least one is always run).
pub fn kmeans(points: &[&[Real]], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyVectors);
    }
    if k == 0 || k > n {
        return Err(Error::InvalidClusterCount { k, n });
    }
    let d = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    let mut rng = SplitMix64::new(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut prev: Option<Vec<usize>> = None;
    let mut wcss_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut assignment, &mut centroids);
        if prev.as_ref() == Some(&assignment) {
            converged = true;
            break;
        }
        centroids = means(points, &assignment, k);
        wcss_history.push(wcss(points, &assignment, &centroids));
        prev = Some(assignment);
    }
    Ok(KMeansResult {
        assignment: prev.expect("at least one iteration runs"),
        centroids,
        iterations,
        converged,
        wcss_history,
    })
}

pub fn kmeans_assign(keys: &[&[Real]], k: usize, seed: u64, max_iters: usize) -> Result<Vec<usize>> {
    kmeans(keys, k, seed, max_iters).map(|r| r.assignment)
}

/// Prompt positions that can be offloaded and retrieved: everything after the
/// sink tokens.
pub fn retrievable_prompt_positions(prompt_len: usize, sinks: usize) -> std::ops::Range<usize> {
    sinks.min(prompt_len)..prompt_len
}

/// Cluster the retrievable prompt keys of one `(layer, kv_head)` into
/// `ceil(count / avg_cluster_size)` semantic clusters. Unit ids are assigned
/// `0..k` in order of each cluster's first position.
pub fn build_prefill_clusters(
    trace: &Trace,
    layer: usize,
    kv_head: usize,
    config: &PolicyConfig,
) -> Result<Vec<CacheUnit>> {
    let positions: Vec<usize> = retrievable_prompt_positions(trace.prompt_len, config.sinks).collect();
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    let k = positions.len().div_ceil(config.avg_cluster_size.max(1));
    let keys: Vec<&[Real]> = positions.iter().map(|&p| trace.key(layer, p, kv_head)).collect();
    let seed = derive_seed(config.cluster_seed, &[layer as u64, kv_head as u64]);
    let result = kmeans(&keys, k, seed, config.kmeans_max_iters)?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (&pos, &a) in positions.iter().zip(&result.assignment) {
        members[a].push(pos);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| members[c][0]);
    order
        .into_iter()
        .enumerate()
        .map(|(id, c)| {
            CacheUnit::from_positions(
                trace,
                layer,
                kv_head,
                id as u64,
                UnitKind::SemanticCluster,
                std::mem::take(&mut members[c]),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Geometry;
    use crate::trace::{generate_trace, SyntheticSpec};

    fn refs(v: &[Vec<Real>]) -> Vec<&[Real]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(compute_centroid(&[&[1.0, 1.0]]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(compute_centroid(&[&[0.0, 0.0], &[2.0, 2.0]]).unwrap(), vec![1.0, 1.0]);
        let c = compute_centroid(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap();
        assert!(c.iter().all(|x| (x - 2.0 / 3.0).abs() < 1e-6));
        assert!(matches!(compute_centroid(&[]), Err(Error::EmptyVectors)));
    }

    #[test]
    fn single_cluster() {
        let pts = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![7.0, 7.0]];
        assert_eq!(kmeans_assign(&refs(&pts), 1, 5, 50).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn bad_k() {
        let pts = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            kmeans_assign(&refs(&pts), 3, 0, 5),
            Err(Error::InvalidClusterCount { .. })
        ));
        assert!(matches!(
            kmeans_assign(&refs(&pts), 0, 0, 5),
            Err(Error::InvalidClusterCount { .. })
        ));
    }

    #[test]
    fn two_separated_groups_recovered() {
        let mut rng = SplitMix64::new(99);
        let mut pts = Vec::new();
        for i in 0..40 {
            let cx = if i < 20 { 10.0 } else { -10.0 };
            pts.push(vec![cx + rng.gaussian_real() * 0.5, rng.gaussian_real() * 0.5]);
        }
        for seed in 0..10 {
            let a = kmeans_assign(&refs(&pts), 2, seed, 50).unwrap();
            assert!(a[..20].iter().all(|&x| x == a[0]));
            assert!(a[20..].iter().all(|&x| x == a[20]));
            assert_ne!(a[0], a[20]);
        }
    }

    #[test]
    fn identical_points_still_fill_every_cluster() {
        let pts = vec![vec![3.0, 3.0]; 9];
        let a = kmeans_assign(&refs(&pts), 2, 1, 50).unwrap();
        assert_eq!(a.len(), 9);
        assert!(a.contains(&0) && a.contains(&1));
    }

    #[test]
    fn lloyd_is_monotone_and_centroids_are_fixed_points() {
        let mut rng = SplitMix64::new(5);
        let pts: Vec<Vec<Real>> = (0..120)
            .map(|_| (0..4).map(|_| rng.gaussian_real()).collect())
            .collect();
        let r = kmeans(&refs(&pts), 7, 3, 100).unwrap();
        for w in r.wcss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", r.wcss_history);
        }
        for c in 0..7 {
            let members: Vec<&[Real]> = pts
                .iter()
                .zip(&r.assignment)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p.as_slice())
                .collect();
            let mean = compute_centroid(&members).unwrap();
            for (x, y) in mean.iter().zip(&r.centroids[c]) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert_eq!(r, kmeans(&refs(&pts), 7, 3, 100).unwrap());
    }

    fn trace(prompt_len: usize) -> Trace {
        generate_trace(&SyntheticSpec {
            prompt_len,
            gen_len: 0,
            segment_lengths: vec![],
            key_cluster_count: 2,
            geometry: Geometry::new(1, 2, 1, 8).unwrap(),
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn cfg(sinks: usize) -> PolicyConfig {
        PolicyConfig {
            sinks,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn prefill_cluster_counts() {
        let units = build_prefill_clusters(&trace(32), 0, 0, &cfg(0)).unwrap();
        assert_eq!(units.len(), 2);
        let mut all: Vec<usize> = units.iter().flat_map(|u| u.member_positions.clone()).collect();
        all.sort();
        assert_eq!(all, (0..32).collect::<Vec<_>>());

        assert!(build_prefill_clusters(&trace(32), 0, 0, &cfg(32)).unwrap().is_empty());
        assert!(build_prefill_clusters(&trace(32), 0, 0, &cfg(40)).unwrap().is_empty());

        let units = build_prefill_clusters(&trace(33), 0, 0, &cfg(16)).unwrap();
        assert_eq!(units.len(), 2);
        assert!(units.iter().all(|u| u.size() >= 1));
        assert_eq!(units.iter().map(|u| u.size()).sum::<usize>(), 17);
    }

    #[test]
    fn prefill_units_are_well_formed() {
        let t = trace(100);
        let units = build_prefill_clusters(&t, 0, 0, &cfg(4)).unwrap();
        assert_eq!(units.len(), 6);
        for (i, u) in units.iter().enumerate() {
            assert_eq!(u.unit_id, i as u64);
            assert_eq!(u.kind, UnitKind::SemanticCluster);
            assert!(u.member_positions.windows(2).all(|w| w[0] < w[1]));
            let keys: Vec<&[Real]> = u.member_positions.iter().map(|&p| t.key(0, p, 0)).collect();
            assert_eq!(compute_centroid(&keys).unwrap(), u.centroid);
        }
    }
}
