//! Unit scoring and budgeted selection.

use std::cmp::Ordering;
use std::ops::Range;

use crate::cluster::{CacheUnit, UnitKind};
use crate::error::{Error, Result};
use crate::numeric::{attention_logits, softmax_in_place, Real};
use crate::trace::Trace;

/// Group-aggregated unit scores for the query heads sharing one KV head:
/// softmax over centroids of `q_j . C_i / sqrt(d)` per head, averaged over
/// the group.
pub fn group_scores<Q: AsRef<[Real]>, C: AsRef<[Real]>>(query_group: &[Q], centroids: &[C]) -> Result<Vec<Real>> {
    if centroids.is_empty() {
        return Err(Error::EmptyCentroids);
    }
    if query_group.is_empty() {
        return Err(Error::HeadCountMismatch { expected: 1, actual: 0 });
    }
    let d = query_group[0].as_ref().len();
    if let Some(c) = centroids.iter().find(|c| c.as_ref().len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: c.as_ref().len(),
        });
    }
    let mut acc = vec![0.0; centroids.len()];
    for q in query_group {
        let q = q.as_ref();
        if q.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: q.len(),
            });
        }
        let mut probs = attention_logits(q, centroids.iter().map(|c| c.as_ref()));
        softmax_in_place(&mut probs)?;
        acc.iter_mut().zip(&probs).for_each(|(a, p)| *a += p);
    }
    let g = query_group.len() as Real;
    acc.iter_mut().for_each(|a| *a /= g);
    Ok(acc)
}

/// Indices ordered by score descending, lower index first on ties.
pub fn rank_by_score(scores: &[Real]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Greedy budgeted selection: walk units by descending score and take each
/// one whose size still fits in the remaining budget. Returns unit indices in
/// the order they were taken.
pub fn select_units(scores: &[Real], sizes: &[usize], budget: usize) -> Vec<usize> {
    assert_eq!(scores.len(), sizes.len(), "one size per score");
    let mut remaining = budget;
    let mut out = Vec::new();
    for i in rank_by_score(scores) {
        if remaining == 0 {
            break;
        }
        if sizes[i] <= remaining {
            remaining -= sizes[i];
            out.push(i);
        }
    }
    out
}

/// Split `positions` into consecutive pages of `page_size` (the last one may
/// be short), each indexed by the mean of its keys.
pub fn build_pages(
    trace: &Trace,
    layer: usize,
    kv_head: usize,
    positions: Range<usize>,
    page_size: usize,
    first_unit_id: u64,
) -> Result<Vec<CacheUnit>> {
    let page_size = page_size.max(1);
    let all: Vec<usize> = positions.collect();
    all.chunks(page_size)
        .enumerate()
        .map(|(i, chunk)| {
            CacheUnit::from_positions(
                trace,
                layer,
                kv_head,
                first_unit_id + i as u64,
                UnitKind::Page,
                chunk.to_vec(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{stable_softmax, Geometry};
    use crate::trace::{generate_trace, SyntheticSpec};

    #[test]
    fn group_score_examples() {
        assert_eq!(group_scores(&[[0.3, -1.0]], &[[2.0, 2.0]]).unwrap(), vec![1.0]);

        let q = [0.5, -1.5, 2.0];
        let cs = [[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [-1.0, 2.0, 0.5]];
        assert_eq!(group_scores(&[q, q], &cs).unwrap(), group_scores(&[q], &cs).unwrap());

        let s = group_scores(&[[(3.0 as Real).ln()]], &[[1.0], [0.0]]).unwrap();
        assert!((s[0] - 0.75).abs() < 1e-9 && (s[1] - 0.25).abs() < 1e-9);

        assert!(matches!(
            group_scores(&[q], &[] as &[[Real; 3]]),
            Err(Error::EmptyCentroids)
        ));
    }

    #[test]
    fn group_scores_match_brute_force_mean_of_softmax() {
        let mut rng = crate::rng::SplitMix64::new(17);
        for _ in 0..50 {
            let d = 1 + rng.below(6);
            let g = 1 + rng.below(4);
            let n = 1 + rng.below(10);
            let qs: Vec<Vec<Real>> = (0..g).map(|_| (0..d).map(|_| rng.gaussian_real()).collect()).collect();
            let cs: Vec<Vec<Real>> = (0..n).map(|_| (0..d).map(|_| rng.gaussian_real()).collect()).collect();
            let got = group_scores(&qs, &cs).unwrap();
            let mut want = vec![0.0; n];
            for q in &qs {
                let logits: Vec<Real> = cs
                    .iter()
                    .map(|c| q.iter().zip(c).map(|(a, b)| a * b).sum::<Real>() / (d as Real).sqrt())
                    .collect();
                for (w, p) in want.iter_mut().zip(stable_softmax(&logits).unwrap()) {
                    *w += p / g as Real;
                }
            }
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((got.iter().sum::<Real>() - 1.0).abs() < 1e-9);
            assert_eq!(rank_by_score(&got), rank_by_score(&want));
        }
    }

    #[test]
    fn group_scores_permute_with_centroids() {
        let qs = [[0.2, 1.0], [-0.4, 0.9]];
        let cs = [[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]];
        let perm = [cs[2], cs[0], cs[1]];
        let a = group_scores(&qs, &cs).unwrap();
        let b = group_scores(&qs, &perm).unwrap();
        assert!((a[2] - b[0]).abs() < 1e-15 && (a[0] - b[1]).abs() < 1e-15 && (a[1] - b[2]).abs() < 1e-15);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_units(&[0.9, 0.8, 0.5], &[3, 2, 2], 5), vec![0, 1]);
        assert!(select_units(&[0.9, 0.8], &[1, 1], 0).is_empty());
        assert_eq!(select_units(&[0.9, 0.8], &[10, 2], 4), vec![1]);
        // ties: lower index first
        assert_eq!(select_units(&[0.5, 0.5, 0.5], &[1, 1, 1], 2), vec![0, 1]);
    }

    #[test]
    fn page_partition() {
        let t = generate_trace(&SyntheticSpec {
            prompt_len: 40,
            gen_len: 0,
            segment_lengths: vec![],
            key_cluster_count: 2,
            geometry: Geometry::new(1, 1, 1, 4).unwrap(),
            ..SyntheticSpec::default()
        })
        .unwrap();
        let sizes = |r: Range<usize>, p| -> Vec<usize> {
            build_pages(&t, 0, 0, r, p, 0)
                .unwrap()
                .iter()
                .map(|u| u.size())
                .collect()
        };
        assert_eq!(sizes(0..10, 4), vec![4, 4, 2]);
        assert_eq!(sizes(3..35, 16), vec![16, 16]);
        assert_eq!(sizes(7..8, 16), vec![1]);
        assert!(sizes(5..5, 16).is_empty());
        let pages = build_pages(&t, 0, 0, 0..10, 4, 7).unwrap();
        assert_eq!(pages[2].unit_id, 9);
        assert_eq!(pages[1].member_positions, vec![4, 5, 6, 7]);
    }
}
