//! Closed-form device KV-cache footprints of full caching, page-indexed
//! retrieval (with and without offload) and cluster/segment retrieval.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FootprintMethod {
    /// Whole cache resident.
    FullCache,
    /// Whole cache resident plus two index vectors per page.
    Quest,
    /// Budget resident plus two index vectors per page.
    Arkvale,
    /// Budget resident plus one centroid per cluster and per segment.
    Louiskv,
}

impl FootprintMethod {
    pub const ALL: [FootprintMethod; 4] = [
        FootprintMethod::FullCache,
        FootprintMethod::Quest,
        FootprintMethod::Arkvale,
        FootprintMethod::Louiskv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FootprintMethod::FullCache => "full_cache",
            FootprintMethod::Quest => "quest",
            FootprintMethod::Arkvale => "arkvale",
            FootprintMethod::Louiskv => "louiskv",
        }
    }
}

impl fmt::Display for FootprintMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FootprintMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintParams {
    pub layers: u64,
    pub heads: u64,
    pub head_dim: u64,
    /// Input length.
    pub n: u64,
    /// Output length.
    pub m: u64,
    pub page_size: u64,
    pub budget: u64,
    pub cluster_size: f64,
    pub segment_size: f64,
    pub bytes_per_elem: u64,
}

impl Default for FootprintParams {
    fn default() -> Self {
        Self {
            layers: 32,
            heads: 8,
            head_dim: 128,
            n: 32768,
            m: 512,
            page_size: 16,
            budget: 1024,
            cluster_size: 16.0,
            segment_size: 16.0,
            bytes_per_elem: 2,
        }
    }
}

impl FootprintParams {
    /// `2 * bytes_per_elem * L * h * d_h`: one K and one V element per head dim.
    pub fn base_factor(&self) -> u64 {
        2 * self.bytes_per_elem * self.layers * self.heads * self.head_dim
    }
}

/// `num / den` rounded once; exact whenever the quotient is an integer below 2^53.
fn ratio(num: u128, den: u128) -> f64 {
    (num / den) as f64 + (num % den) as f64 / den as f64
}

fn as_count(x: f64) -> Option<u128> {
    (x >= 1.0 && x.fract() == 0.0 && x < 4_294_967_296.0).then_some(x as u128)
}

/// Device footprint in bytes. Evaluated in exact integer arithmetic, except
/// for LouisKV with fractional average cluster or segment sizes.
pub fn memory_footprint(method: FootprintMethod, p: &FootprintParams) -> f64 {
    let base = p.base_factor() as u128;
    let (n, m, pg, b) = (p.n as u128, p.m as u128, p.page_size as u128, p.budget as u128);
    let (num, den) = match method {
        FootprintMethod::FullCache => (n + m, 1),
        FootprintMethod::Quest => ((n + m) * (pg + 1), pg),
        FootprintMethod::Arkvale => (b * pg + n + m, pg),
        FootprintMethod::Louiskv => match (as_count(p.cluster_size), as_count(p.segment_size)) {
            (Some(c), Some(s)) => (4 * b * c * s + 2 * n * s + 2 * m * c, 4 * c * s),
            _ => {
                let entries =
                    p.budget as f64 + p.n as f64 / (2.0 * p.cluster_size) + p.m as f64 / (2.0 * p.segment_size);
                return base as f64 * entries;
            }
        },
    };
    ratio(num * base, den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> FootprintParams {
        FootprintParams {
            layers: 1,
            heads: 1,
            head_dim: 1,
            n: 8,
            m: 8,
            page_size: 4,
            budget: 4,
            cluster_size: 4.0,
            segment_size: 4.0,
            bytes_per_elem: 2,
        }
    }

    #[test]
    fn small_examples() {
        let p = unit_params();
        assert_eq!(memory_footprint(FootprintMethod::FullCache, &p), 64.0);
        assert_eq!(memory_footprint(FootprintMethod::Arkvale, &p), 32.0);
        assert_eq!(memory_footprint(FootprintMethod::Louiskv, &p), 24.0);
        assert_eq!(memory_footprint(FootprintMethod::Quest, &p), 80.0);
    }

    #[test]
    fn offloading_methods_do_not_grow_with_output() {
        let mut p = FootprintParams::default();
        let a0 = memory_footprint(FootprintMethod::FullCache, &p);
        p.m *= 4;
        assert!(memory_footprint(FootprintMethod::FullCache, &p) > a0);
        let l = memory_footprint(FootprintMethod::Louiskv, &p);
        let ark = memory_footprint(FootprintMethod::Arkvale, &p);
        assert!(l < ark);
    }

    #[test]
    fn integer_results_are_exact() {
        let p = FootprintParams {
            n: 1_000_006,
            m: 77_777,
            page_size: 7,
            ..FootprintParams::default()
        };
        // (n + m) is divisible by 7, so the Quest index term is whole
        let want = p.base_factor() * (p.n + p.m) / 7 * 8;
        assert_eq!(memory_footprint(FootprintMethod::Quest, &p), want as f64);
    }

    #[test]
    fn fractional_average_sizes() {
        let p = FootprintParams {
            cluster_size: 2.5,
            segment_size: 4.0,
            ..unit_params()
        };
        let got = memory_footprint(FootprintMethod::Louiskv, &p);
        assert!((got - 4.0 * (4.0 + 8.0 / 5.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in FootprintMethod::ALL {
            assert_eq!(m.name().parse::<FootprintMethod>().unwrap(), m);
        }
    }
}
