//! Synthetic traces with planted temporal locality.
//!
//! Prompt keys are drawn around `key_cluster_count` directions per KV head
//! (orthonormal when the head dimension allows it). Decode steps are split
//! into planted segments; every query in a segment points at one designated
//! key cluster, so consecutive queries stay similar inside a segment and jump
//! at its start. Generated keys of a segment share their own direction, which
//! makes each segment a coherent block in key space.

use serde::{Deserialize, Serialize};

use super::{Annotations, Tensor4, Trace};
use crate::error::{Error, Result};
use crate::numeric::{Geometry, Real};
use crate::rng::{derive_seed, SplitMix64};

/// Placement of prompt key clusters over positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyLayout {
    /// Clusters interleaved across the whole prompt.
    Sparse,
    /// Each cluster occupies one contiguous block.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub segment_lengths: Vec<usize>,
    pub key_cluster_count: usize,
    pub key_layout: KeyLayout,
    /// Per-component Gaussian noise added to unit query directions.
    pub noise_sigma: f64,
    pub geometry: Geometry,
    /// Per-component noise of keys around their direction.
    pub key_spread: f64,
    /// Query magnitude; the scaled logit against an on-target key is about this value.
    pub query_gain: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_len: 256,
            gen_len: 128,
            segment_lengths: vec![32; 4],
            key_cluster_count: 8,
            key_layout: KeyLayout::Sparse,
            noise_sigma: 0.05,
            geometry: Geometry {
                num_layers: 4,
                num_q_heads: 8,
                num_kv_heads: 2,
                head_dim: 16,
            },
            key_spread: 0.1,
            query_gain: 8.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.prompt_len == 0 {
            return bad("prompt_len must be >= 1".into());
        }
        let total: usize = self.segment_lengths.iter().sum();
        if total != self.gen_len {
            return bad(format!("segment lengths sum to {total}, gen_len is {}", self.gen_len));
        }
        if self.segment_lengths.contains(&0) {
            return bad("segment lengths must be >= 1".into());
        }
        if self.key_cluster_count == 0 || self.key_cluster_count > self.prompt_len {
            return bad(format!(
                "key_cluster_count {} must be in 1..={}",
                self.key_cluster_count, self.prompt_len
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("key_spread", self.key_spread),
            ("query_gain", self.query_gain),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// 1-based decode steps opening each planted segment.
    pub fn segment_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.segment_lengths.len());
        let mut t = 1;
        for &len in &self.segment_lengths {
            starts.push(t);
            t += len;
        }
        starts
    }

    /// Prompt position -> planted key cluster.
    pub fn cluster_layout(&self) -> Vec<usize> {
        let k = self.key_cluster_count;
        let p = self.prompt_len;
        match self.key_layout {
            KeyLayout::Dense => (0..p).map(|i| i * k / p).collect(),
            KeyLayout::Sparse => {
                // Each round places every cluster once in a shuffled order, so
                // with three or more rounds no cluster is contiguous.
                let mut rng = SplitMix64::new(derive_seed(self.seed, &[0]));
                let mut out = Vec::with_capacity(p);
                let mut round: Vec<usize> = (0..k).collect();
                while out.len() < p {
                    rng.shuffle(&mut round);
                    let take = (p - out.len()).min(k);
                    out.extend_from_slice(&round[..take]);
                }
                out
            }
        }
    }

    /// Target key cluster of each planted segment; neighbours always differ
    /// when there are at least two clusters.
    pub fn segment_targets(&self) -> Vec<usize> {
        let k = self.key_cluster_count;
        let mut rng = SplitMix64::new(derive_seed(self.seed, &[1]));
        let mut out: Vec<usize> = Vec::with_capacity(self.segment_lengths.len());
        for _ in &self.segment_lengths {
            let next = match out.last() {
                Some(&prev) if k > 1 => (prev + 1 + rng.below(k - 1)) % k,
                _ => rng.below(k),
            };
            out.push(next);
        }
        out
    }
}

fn quantize(x: f64) -> Real {
    x as f32 as Real
}

fn random_unit(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `count` unit directions, Gram-Schmidt orthonormalised while `count <= d`.
fn directions(rng: &mut SplitMix64, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut v = random_unit(rng, d);
        if i < d {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
        out.push(v);
    }
    out
}

pub fn generate_trace(spec: &SyntheticSpec) -> Result<Trace> {
    spec.validate()?;
    let g = spec.geometry;
    let d = g.head_dim;
    let p = spec.prompt_len;
    let m = spec.gen_len;
    let n = p + m;
    let layout = spec.cluster_layout();
    let targets = spec.segment_targets();
    // step index (0-based) -> segment
    let seg_of_step: Vec<usize> = spec
        .segment_lengths
        .iter()
        .enumerate()
        .flat_map(|(s, &len)| std::iter::repeat_n(s, len))
        .collect();

    let mut q = Tensor4::zeros([g.num_layers, m, g.num_q_heads, d]);
    let mut k = Tensor4::zeros([g.num_layers, n, g.num_kv_heads, d]);
    let mut v = Tensor4::zeros([g.num_layers, n, g.num_kv_heads, d]);
    let key_norm = (d as f64).sqrt();

    for layer in 0..g.num_layers {
        let mut rng = SplitMix64::new(derive_seed(spec.seed, &[2, layer as u64]));
        let cluster_dirs: Vec<Vec<Vec<f64>>> = (0..g.num_kv_heads)
            .map(|_| directions(&mut rng, spec.key_cluster_count, d))
            .collect();
        let segment_dirs: Vec<Vec<Vec<f64>>> = (0..g.num_kv_heads)
            .map(|_| {
                (0..spec.segment_lengths.len())
                    .map(|_| random_unit(&mut rng, d))
                    .collect()
            })
            .collect();

        for pos in 0..n {
            for h in 0..g.num_kv_heads {
                let dir = if pos < p {
                    &cluster_dirs[h][layout[pos]]
                } else {
                    &segment_dirs[h][seg_of_step[pos - p]]
                };
                let row = k.row_mut(layer, pos, h);
                for (x, u) in row.iter_mut().zip(dir) {
                    *x = quantize(key_norm * (u + spec.key_spread * rng.gaussian()));
                }
                for x in v.row_mut(layer, pos, h) {
                    *x = quantize(rng.gaussian());
                }
            }
        }

        for step in 0..m {
            let target = targets[seg_of_step[step]];
            for qh in 0..g.num_q_heads {
                let dir = &cluster_dirs[g.kv_head_of(qh)][target];
                let row = q.row_mut(layer, step, qh);
                for (x, u) in row.iter_mut().zip(dir) {
                    *x = quantize(spec.query_gain * (u + spec.noise_sigma * rng.gaussian()));
                }
            }
        }
    }

    Ok(Trace {
        geometry: g,
        prompt_len: p,
        gen_len: m,
        q,
        k,
        v,
        annotations: Annotations {
            segment_starts: spec.segment_starts(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::cosine_similarity;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            seed: 7,
            prompt_len: 64,
            gen_len: 64,
            segment_lengths: vec![32, 32],
            key_cluster_count: 4,
            geometry: Geometry::new(2, 4, 2, 8).unwrap(),
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_trace(&spec()).unwrap(), generate_trace(&spec()).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec() };
        assert_ne!(generate_trace(&spec()).unwrap(), generate_trace(&other).unwrap());
    }

    #[test]
    fn empty_generation() {
        let s = SyntheticSpec {
            gen_len: 0,
            segment_lengths: vec![],
            ..spec()
        };
        let t = generate_trace(&s).unwrap();
        assert_eq!(t.gen_len, 0);
        assert!(t.q.data.is_empty());
        assert_eq!(t.k.dims[1], 64);
    }

    #[test]
    fn segment_sum_checked() {
        let s = SyntheticSpec {
            segment_lengths: vec![30, 30],
            ..spec()
        };
        assert!(matches!(generate_trace(&s), Err(Error::InvalidSpec(_))));
    }

    fn mean_cosines(t: &Trace, starts: &[usize]) -> (f64, f64) {
        let (mut intra, mut ni, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for step in 2..=t.gen_len {
            let mut c = 0.0;
            for h in 0..t.geometry.num_q_heads {
                c += cosine_similarity(t.query(0, step - 1, h), t.query(0, step, h))
                    .unwrap()
                    .value as f64;
            }
            c /= t.geometry.num_q_heads as f64;
            if starts.contains(&step) {
                cross += c;
                nc += 1;
            } else {
                intra += c;
                ni += 1;
            }
        }
        (intra / ni as f64, cross / nc as f64)
    }

    #[test]
    fn intra_segment_queries_more_similar_than_cross_boundary() {
        let t = generate_trace(&spec()).unwrap();
        let (intra, cross) = mean_cosines(&t, &t.annotations.segment_starts);
        // Calibration at sigma=0.05, d=8: intra ~0.98, cross ~0.
        assert!(intra > 0.95, "intra {intra}");
        assert!(cross < 0.3, "cross {cross}");
        assert!(intra > cross);
    }

    #[test]
    fn sparse_layout_never_contiguous_dense_always() {
        for seed in 0..50 {
            let s = SyntheticSpec {
                seed,
                prompt_len: 37,
                key_cluster_count: 3,
                ..spec()
            };
            let layout = s.cluster_layout();
            for c in 0..3 {
                let pos: Vec<usize> = (0..37).filter(|&i| layout[i] == c).collect();
                assert!(pos.windows(2).any(|w| w[1] != w[0] + 1), "seed {seed} cluster {c}");
            }
            let dense = SyntheticSpec {
                key_layout: KeyLayout::Dense,
                ..s
            }
            .cluster_layout();
            for c in 0..3 {
                let pos: Vec<usize> = (0..37).filter(|&i| dense[i] == c).collect();
                assert!(pos.windows(2).all(|w| w[1] == w[0] + 1));
                assert!(!pos.is_empty());
            }
        }
    }

    #[test]
    fn neighbouring_segments_target_different_clusters() {
        let s = SyntheticSpec {
            segment_lengths: vec![4; 16],
            ..spec()
        };
        let t = s.segment_targets();
        assert!(t.windows(2).all(|w| w[0] != w[1]));
        assert!(t.iter().all(|&c| c < 4));
    }

    #[test]
    fn values_are_f32_representable() {
        let t = generate_trace(&spec()).unwrap();
        assert!(t.k.data.iter().all(|&x| (x as f32) as Real == x));
    }
}
