//! Exact-attention oracle plus recall, error and locality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{attention_logits, norm, softmax_in_place, Real};
use crate::select::rank_by_score;
use crate::trace::Trace;

/// Softmax attention weights of `query` over `keys`.
pub fn attention_weights<K: AsRef<[Real]>>(query: &[Real], keys: &[K]) -> Result<Vec<Real>> {
    if keys.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let mut w = attention_logits(query, keys.iter().map(|k| k.as_ref()));
    softmax_in_place(&mut w)?;
    Ok(w)
}

/// `softmax(q K^T / sqrt(d)) V`.
pub fn full_attention<K: AsRef<[Real]>, V: AsRef<[Real]>>(
    query: &[Real],
    keys: &[K],
    values: &[V],
) -> Result<Vec<Real>> {
    if keys.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: keys.len(),
            actual: values.len(),
        });
    }
    let w = attention_weights(query, keys)?;
    let d = values[0].as_ref().len();
    let mut out = vec![0.0; d];
    for (wi, v) in w.iter().zip(values) {
        out.iter_mut().zip(v.as_ref()).for_each(|(o, x)| *o += wi * x);
    }
    Ok(out)
}

/// Attention restricted to `selected` positions (softmax renormalised over
/// the subset). Positions are visited in ascending order, so selecting every
/// position reproduces [`full_attention`] exactly.
pub fn sparse_attention<K: AsRef<[Real]>, V: AsRef<[Real]>>(
    query: &[Real],
    keys: &[K],
    values: &[V],
    selected: &[usize],
) -> Result<Vec<Real>> {
    let mut idx = selected.to_vec();
    idx.sort_unstable();
    idx.dedup();
    let ks: Vec<&[Real]> = idx.iter().map(|&i| keys[i].as_ref()).collect();
    let vs: Vec<&[Real]> = idx.iter().map(|&i| values[i].as_ref()).collect();
    full_attention(query, &ks, &vs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalSet {
    pub step: usize,
    /// Ascending positions.
    pub positions: Vec<usize>,
}

/// Positions of the `budget` largest attention weights (ties go to the lower
/// position), ascending.
pub fn critical_positions(weights: &[Real], budget: usize) -> Vec<usize> {
    let mut top: Vec<usize> = rank_by_score(weights).into_iter().take(budget).collect();
    top.sort_unstable();
    top
}

pub fn critical_set<K: AsRef<[Real]>>(step: usize, query: &[Real], keys: &[K], budget: usize) -> Result<CriticalSet> {
    let positions = if keys.is_empty() {
        Vec::new()
    } else {
        critical_positions(&attention_weights(query, keys)?, budget)
    };
    Ok(CriticalSet { step, positions })
}

/// `|a ∩ b| / |a ∪ b|` over ascending, duplicate-free slices; 1 when both
/// are empty.
pub fn jaccard(a: &[usize], b: &[usize]) -> Real {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as Real / (a.len() + b.len() - inter) as Real
}

/// Share of full-softmax attention mass held by `selected`.
pub fn recall_from_weights(weights: &[Real], selected: &[usize]) -> Real {
    selected.iter().map(|&i| weights[i]).sum::<Real>().min(1.0)
}

pub fn attention_recall<K: AsRef<[Real]>>(selected: &[usize], query: &[Real], keys: &[K]) -> Result<Real> {
    if selected.is_empty() {
        return Ok(0.0);
    }
    Ok(recall_from_weights(&attention_weights(query, keys)?, selected))
}

pub const REL_ERROR_EPS: Real = 1e-12;

/// `||approx - exact|| / max(||exact||, eps)`.
pub fn output_rel_error(approx: &[Real], exact: &[Real]) -> Real {
    let diff: Vec<Real> = approx.iter().zip(exact).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(exact).max(REL_ERROR_EPS)
}

/// Jaccard of consecutive oracle critical sets for one layer, averaged over
/// query heads. Entry `t - 1` compares steps `t - 1` and `t`; entry 0 is
/// `None`.
pub fn locality_series(trace: &Trace, layer: usize, budget: usize) -> Result<Vec<Option<Real>>> {
    let g = trace.geometry;
    let mut prev: Option<Vec<Vec<usize>>> = None;
    let mut out = Vec::with_capacity(trace.gen_len);
    for t in 1..=trace.gen_len {
        let n = trace.prompt_len + t;
        let mut sets = Vec::with_capacity(g.num_q_heads);
        for qh in 0..g.num_q_heads {
            let kvh = g.kv_head_of(qh);
            let keys: Vec<&[Real]> = (0..n).map(|p| trace.key(layer, p, kvh)).collect();
            sets.push(critical_set(t, trace.query(layer, t, qh), &keys, budget)?.positions);
        }
        out.push(
            prev.as_ref()
                .map(|p| p.iter().zip(&sets).map(|(a, b)| jaccard(a, b)).sum::<Real>() / g.num_q_heads as Real),
        );
        prev = Some(sets);
    }
    Ok(out)
}

/// Means of a locality series split by whether the compared pair straddles a
/// segment start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalitySummary {
    pub budget: usize,
    pub within_mean: Option<Real>,
    pub cross_mean: Option<Real>,
    pub within_min: Option<Real>,
}

pub fn summarize_locality(series: &[Option<Real>], segment_starts: &[usize], budget: usize) -> LocalitySummary {
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    for (i, j) in series.iter().enumerate() {
        let Some(j) = *j else { continue };
        let t = i + 1;
        if segment_starts.contains(&t) {
            cross.push(j);
        } else {
            within.push(j);
        }
    }
    let mean = |v: &[Real]| (!v.is_empty()).then(|| v.iter().sum::<Real>() / v.len() as Real);
    LocalitySummary {
        budget,
        within_mean: mean(&within),
        cross_mean: mean(&cross),
        within_min: within.iter().copied().reduce(Real::min),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN3: Real = 1.0986122886681098;

    #[test]
    fn full_attention_examples() {
        assert_eq!(
            full_attention(&[0.3, 0.1], &[[1.0, 2.0]], &[[5.0, -1.0]]).unwrap(),
            vec![5.0, -1.0]
        );
        let keys = [[1.0, 0.0], [0.0, 3.0], [2.0, 2.0]];
        let vals = [[3.0, 0.0], [0.0, 3.0], [3.0, 3.0]];
        let o = full_attention(&[0.0, 0.0], &keys, &vals).unwrap();
        assert!((o[0] - 2.0).abs() < 1e-12 && (o[1] - 2.0).abs() < 1e-12);
        let o = full_attention(&[LN3], &[[1.0], [0.0]], &[[1.0], [0.0]]).unwrap();
        assert!((o[0] - 0.75).abs() < 1e-9);
        assert!(matches!(
            full_attention(&[1.0], &[] as &[[Real; 1]], &[] as &[[Real; 1]]),
            Err(Error::EmptyKeys)
        ));
    }

    #[test]
    fn sparse_attention_examples() {
        let keys = [[2.0], [1.0], [0.0]];
        let vals = [[1.0], [0.0], [0.0]];
        let full = full_attention(&[1.0], &keys, &vals).unwrap();
        assert_eq!(sparse_attention(&[1.0], &keys, &vals, &[2, 0, 1]).unwrap(), full);
        assert_eq!(sparse_attention(&[1.0], &keys, &vals, &[1]).unwrap(), vec![0.0]);
        let o = sparse_attention(&[1.0], &keys, &vals, &[0, 1]).unwrap();
        assert!((o[0] - 0.7311).abs() < 1e-4);
        assert!(sparse_attention(&[1.0], &keys, &vals, &[]).is_err());
    }

    #[test]
    fn critical_set_examples() {
        let keys = [[0.0], [5.0], [1.0]];
        assert_eq!(critical_set(1, &[1.0], &keys, 5).unwrap().positions, vec![0, 1, 2]);
        assert_eq!(critical_set(1, &[1.0], &keys, 1).unwrap().positions, vec![1]);
        let keys = [[1.0], [1.0], [0.0]];
        assert_eq!(critical_set(1, &[1.0], &keys, 2).unwrap().positions, vec![0, 1]);
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(jaccard(&[1], &[2]), 0.0);
        assert!((jaccard(&[1, 2], &[2, 3]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&[], &[]), 1.0);
    }

    #[test]
    fn recall_examples() {
        let keys = [[1.0], [0.0]];
        assert!((attention_recall(&[0, 1], &[LN3], &keys).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(attention_recall(&[], &[LN3], &keys).unwrap(), 0.0);
        assert!((attention_recall(&[0], &[LN3], &keys).unwrap() - 0.75).abs() < 1e-9);
    }

    #[test]
    fn full_recall_means_zero_error() {
        let keys = [[0.3, 1.0], [1.0, -2.0], [0.5, 0.5]];
        let vals = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let q = [0.7, 0.2];
        let exact = full_attention(&q, &keys, &vals).unwrap();
        let approx = sparse_attention(&q, &keys, &vals, &[0, 1, 2]).unwrap();
        assert_eq!(output_rel_error(&approx, &exact), 0.0);
    }

    #[test]
    fn summary_splits_by_segment_start() {
        let series = [None, Some(1.0), Some(0.0), Some(0.8)];
        let s = summarize_locality(&series, &[1, 3], 4);
        assert_eq!(s.cross_mean, Some(0.0));
        assert!((s.within_mean.unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(s.within_min, Some(0.8));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn recall_is_monotone(ks in prop::collection::vec(-3.0..3.0 as Real, 2..12), q in -3.0..3.0 as Real, a in prop::collection::btree_set(0usize..12, 0..6), extra in 0usize..12) {
                let keys: Vec<[Real; 1]> = ks.iter().map(|&k| [k]).collect();
                let sel: Vec<usize> = a.into_iter().filter(|&i| i < keys.len()).collect();
                let mut bigger = sel.clone();
                if extra < keys.len() && !bigger.contains(&extra) {
                    bigger.push(extra);
                }
                let r0 = attention_recall(&sel, &[q], &keys).unwrap();
                let r1 = attention_recall(&bigger, &[q], &keys).unwrap();
                prop_assert!(r1 + 1e-15 >= r0);
                prop_assert!((0.0..=1.0).contains(&r0));
            }
        }
    }
}
