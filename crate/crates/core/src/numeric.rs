//! Shared vector math: dot products, cosine similarity, stable softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compute precision for all simulator arithmetic.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Model shape shared by every tensor in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl Geometry {
    pub fn new(num_layers: usize, num_q_heads: usize, num_kv_heads: usize, head_dim: usize) -> Result<Self> {
        let g = Self {
            num_layers,
            num_q_heads,
            num_kv_heads,
            head_dim,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_q_heads == 0 || self.num_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::InvalidGeometry("all counts must be >= 1".into()));
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::InvalidGeometry(format!(
                "{} query heads not divisible by {} kv heads",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    /// Query heads mapped onto `kv_head`.
    pub fn q_heads_of(&self, kv_head: usize) -> std::ops::Range<usize> {
        let g = self.group_size();
        kv_head * g..(kv_head + 1) * g
    }
}

pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[Real]) -> Real {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of [`cosine_similarity`]. `degenerate` is set when either input has
/// zero norm, in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: Real,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[Real], b: &[Real]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

/// Softmax with max-subtraction.
pub fn stable_softmax(scores: &[Real]) -> Result<Vec<Real>> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place(scores: &mut [Real]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let max = scores.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
    Ok(())
}

/// Scaled attention logits `q . k / sqrt(d)` for every key row.
pub fn attention_logits<'a>(query: &[Real], keys: impl IntoIterator<Item = &'a [Real]>) -> Vec<Real> {
    let scale = (query.len() as Real).sqrt();
    keys.into_iter().map(|k| dot(query, k) / scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap().value, 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap().value;
        assert!((c as f64 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_zero_vector_is_flagged() {
        let c = cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(stable_softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let p = stable_softmax(&[0.0, (3.0 as Real).ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-9);
        assert!((p[1] - 0.75).abs() < 1e-9);
        assert!(matches!(stable_softmax(&[]), Err(Error::EmptyScores)));
    }

    #[test]
    fn geometry_group_mapping() {
        let g = Geometry::new(1, 8, 2, 4).unwrap();
        assert_eq!(g.group_size(), 4);
        assert_eq!(g.kv_head_of(5), 1);
        assert_eq!(g.q_heads_of(1), 4..8);
        assert!(Geometry::new(1, 6, 4, 4).is_err());
        assert!(Geometry::new(0, 1, 1, 1).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn vec2(n: usize) -> impl Strategy<Value = (Vec<Real>, Vec<Real>)> {
            (
                prop::collection::vec(-10.0..10.0 as Real, n),
                prop::collection::vec(-10.0..10.0 as Real, n),
            )
        }

        proptest! {
            #[test]
            fn cosine_symmetric_and_scale_invariant((a, b) in vec2(6), alpha in 0.01..100.0 as Real) {
                prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
                let ab = cosine_similarity(&a, &b).unwrap().value;
                let ba = cosine_similarity(&b, &a).unwrap().value;
                prop_assert!((ab - ba).abs() < 1e-9);
                let scaled: Vec<Real> = a.iter().map(|x| x * alpha).collect();
                let sb = cosine_similarity(&scaled, &b).unwrap().value;
                prop_assert!((ab - sb).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&ab));
            }

            #[test]
            fn softmax_shift_invariant(xs in prop::collection::vec(-50.0..50.0 as Real, 1..20), c in -100.0..100.0 as Real) {
                let p = stable_softmax(&xs).unwrap();
                let shifted: Vec<Real> = xs.iter().map(|x| x + c).collect();
                let q = stable_softmax(&shifted).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                let total: Real = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|&x| x > 0.0));
                // order-preserving
                for i in 0..xs.len() {
                    for j in 0..xs.len() {
                        if xs[i] < xs[j] {
                            prop_assert!(p[i] <= p[j]);
                        }
                    }
                }
            }
        }
    }
}
