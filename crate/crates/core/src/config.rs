//! Policy configuration and its flat key-value file format.
//!
//! ```text
//! # global keys apply to every policy
//! budget = 1024
//! tau = 0.7
//! full_cache_layers = 0,1
//!
//! # a section named after a policy overrides keys for that policy only
//! [fixed_stride]
//! stride = 16
//! ```
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Keys are the
//! same names the CLI accepts as `--flag` (with `-` in place of `_`).
//! Sections named after a CLI subcommand (see [`COMMAND_SECTIONS`]) hold the
//! defaults for that subcommand's own flags.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::numeric::Real;

/// When a retrieval is triggered during decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "stride")]
pub enum Policy {
    /// Retrieve at semantic boundaries (query-similarity drop below tau).
    Louiskv,
    /// Retrieve at every step over fixed-size pages.
    PerTokenPages,
    /// Retrieve at steps `t` with `t % k == 1 % k`.
    FixedStride(usize),
    /// Keep everything resident, never retrieve.
    FullCache,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Louiskv => "louiskv",
            Policy::PerTokenPages => "per_token_pages",
            Policy::FixedStride(_) => "fixed_stride",
            Policy::FullCache => "full_cache",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::FixedStride(k) => write!(f, "fixed_stride({k})"),
            p => f.write_str(p.name()),
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    /// Accepts `louiskv`, `per_token_pages`, `full_cache`, `fixed_stride`
    /// (stride taken from the `stride` key) and `fixed_stride(k)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "louiskv" => Ok(Policy::Louiskv),
            "per_token_pages" => Ok(Policy::PerTokenPages),
            "full_cache" => Ok(Policy::FullCache),
            "fixed_stride" => Ok(Policy::FixedStride(0)),
            _ => {
                let inner = s
                    .strip_prefix("fixed_stride(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown policy `{s}`"))?;
                let k: usize = inner.trim().parse().map_err(|_| format!("bad stride in `{s}`"))?;
                if k == 0 {
                    return Err("stride must be >= 1".into());
                }
                Ok(Policy::FixedStride(k))
            }
        }
    }
}

/// Whether every layer decides boundaries from its own queries or all layers
/// follow one designated layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    Shared,
    PerLayer,
}

/// Granularity of retrievable units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Management {
    /// k-means clusters for the prompt, semantic segments for generated tokens.
    Decoupled,
    /// Fixed-size pages everywhere.
    Paged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub policy: Policy,
    /// Max KV entries held by retrieved units per KV head.
    pub budget: usize,
    pub tau: Real,
    pub sinks: usize,
    /// Local buffer capacity in generated tokens.
    pub window: usize,
    pub page_size: usize,
    pub avg_cluster_size: usize,
    pub full_cache_layers: Vec<usize>,
    pub boundary_mode: BoundaryMode,
    /// Layer whose queries drive boundaries in shared mode.
    pub boundary_layer: usize,
    /// `None` picks the policy default: paged for `per_token_pages`,
    /// decoupled otherwise.
    pub management: Option<Management>,
    pub cluster_seed: u64,
    pub kmeans_max_iters: usize,
    /// Host-device bandwidth in bytes per second.
    pub bandwidth: f64,
    /// Bytes per stored element for transfer and footprint accounting.
    pub bytes_per_elem: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Louiskv,
            budget: 1024,
            tau: 0.7,
            sinks: 64,
            window: 256,
            page_size: 16,
            avg_cluster_size: 16,
            full_cache_layers: vec![0, 1],
            boundary_mode: BoundaryMode::Shared,
            boundary_layer: 0,
            management: None,
            cluster_seed: 0,
            kmeans_max_iters: 50,
            bandwidth: 32e9,
            bytes_per_elem: 2,
        }
    }
}

/// Every key understood by [`PolicyConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "policy",
    "budget",
    "tau",
    "sinks",
    "window",
    "page_size",
    "avg_cluster_size",
    "full_cache_layers",
    "boundary_mode",
    "boundary_layer",
    "management",
    "stride",
    "cluster_seed",
    "kmeans_max_iters",
    "bandwidth",
    "bytes_per_elem",
];

/// Subcommand sections and the keys each accepts.
pub const COMMAND_SECTIONS: &[(&str, &[&str])] = &[
    (
        "gen",
        &[
            "seed",
            "prompt",
            "gen",
            "segments",
            "clusters",
            "layout",
            "noise",
            "layers",
            "q_heads",
            "kv_heads",
            "head_dim",
            "key_spread",
            "query_gain",
        ],
    ),
    ("compare", &["policies"]),
    ("sweep_tau", &["taus"]),
    (
        "mem_report",
        &[
            "methods",
            "layers",
            "heads",
            "head_dim",
            "n",
            "m",
            "page_size",
            "budget",
            "cluster_size",
            "segment_size",
            "bytes_per_elem",
        ],
    ),
    ("analyze_locality", &["layer", "budgets"]),
];

fn invalid(key: &str, value: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        msg: msg.into(),
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| invalid(key, value, e.to_string()))
}

impl PolicyConfig {
    pub fn with_policy(policy: Policy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn management(&self) -> Management {
        match (self.policy, self.management) {
            (Policy::PerTokenPages, _) => Management::Paged,
            (_, Some(m)) => m,
            (_, None) => Management::Decoupled,
        }
    }

    pub fn is_full_cache_layer(&self, layer: usize) -> bool {
        self.policy == Policy::FullCache || self.full_cache_layers.contains(&layer)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "policy" => {
                let p: Policy = value.parse().map_err(|m: String| invalid(key, value, m))?;
                self.policy = match (p, self.policy) {
                    (Policy::FixedStride(0), Policy::FixedStride(k)) => Policy::FixedStride(k),
                    (Policy::FixedStride(0), _) => Policy::FixedStride(1),
                    (p, _) => p,
                };
            }
            "stride" => {
                let k: usize = parse_num(key, value)?;
                if k == 0 {
                    return Err(invalid(key, value, "must be >= 1"));
                }
                if let Policy::FixedStride(_) = self.policy {
                    self.policy = Policy::FixedStride(k);
                }
            }
            "budget" => self.budget = parse_num(key, value)?,
            "tau" => {
                let t: Real = parse_num(key, value)?;
                if !t.is_finite() {
                    return Err(invalid(key, value, "must be finite"));
                }
                self.tau = t;
            }
            "sinks" => self.sinks = parse_num(key, value)?,
            "window" => self.window = parse_num(key, value)?,
            "page_size" | "avg_cluster_size" => {
                let v: usize = parse_num(key, value)?;
                if v == 0 {
                    return Err(invalid(key, value, "must be >= 1"));
                }
                if key == "page_size" {
                    self.page_size = v;
                } else {
                    self.avg_cluster_size = v;
                }
            }
            "full_cache_layers" => {
                self.full_cache_layers = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| parse_num::<usize>(key, s.trim()))
                        .collect::<Result<_, _>>()?
                };
            }
            "boundary_mode" => {
                self.boundary_mode = match value {
                    "shared" => BoundaryMode::Shared,
                    "per_layer" => BoundaryMode::PerLayer,
                    _ => return Err(invalid(key, value, "expected shared or per_layer")),
                }
            }
            "boundary_layer" => self.boundary_layer = parse_num(key, value)?,
            "management" => {
                self.management = match value {
                    "decoupled" | "clusters" => Some(Management::Decoupled),
                    "paged" | "pages" => Some(Management::Paged),
                    "auto" => None,
                    _ => return Err(invalid(key, value, "expected decoupled, paged or auto")),
                }
            }
            "cluster_seed" => self.cluster_seed = parse_num(key, value)?,
            "kmeans_max_iters" => {
                let v: usize = parse_num(key, value)?;
                if v == 0 {
                    return Err(invalid(key, value, "must be >= 1"));
                }
                self.kmeans_max_iters = v;
            }
            "bandwidth" => {
                let b: f64 = parse_num(key, value)?;
                if !(b.is_finite() && b > 0.0) {
                    return Err(invalid(key, value, "must be positive"));
                }
                self.bandwidth = b;
            }
            "bytes_per_elem" => {
                let v: usize = parse_num(key, value)?;
                if v == 0 {
                    return Err(invalid(key, value, "must be >= 1"));
                }
                self.bytes_per_elem = v;
            }
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }
}

/// Parsed config file: global assignments plus per-policy sections, each in
/// file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub global: Vec<(String, String)>,
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut out = ConfigFile::default();
        let mut current: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let syntax = |msg: &str| ConfigError::Syntax {
                line: i + 1,
                msg: msg.into(),
            };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| syntax("unterminated section header"))?
                    .trim();
                let is_command = COMMAND_SECTIONS.iter().any(|(n, _)| *n == name);
                if !is_command && (name.parse::<Policy>().is_err() || name.starts_with("fixed_stride(")) {
                    return Err(syntax(&format!("unknown section `{name}`")));
                }
                current = Some(match out.sections.iter().position(|(n, _)| n == name) {
                    Some(idx) => idx,
                    None => {
                        out.sections.push((name.to_string(), Vec::new()));
                        out.sections.len() - 1
                    }
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
            let key = k.trim().replace('-', "_");
            let allowed = current
                .and_then(|idx| COMMAND_SECTIONS.iter().find(|(n, _)| *n == out.sections[idx].0))
                .map_or(CONFIG_KEYS, |(_, keys)| *keys);
            if !allowed.contains(&key.as_str()) {
                return Err(syntax(&format!("unknown key `{key}`")));
            }
            let entry = (key, v.trim().to_string());
            match current {
                None => out.global.push(entry),
                Some(idx) => out.sections[idx].1.push(entry),
            }
        }
        Ok(out)
    }

    /// Apply global keys, then the section matching the (possibly just
    /// updated) policy name.
    pub fn apply(&self, cfg: &mut PolicyConfig) -> Result<(), ConfigError> {
        for (k, v) in &self.global {
            cfg.set(k, v)?;
        }
        self.apply_section(cfg)
    }

    /// Entries of a named section, empty if absent.
    pub fn section(&self, name: &str) -> &[(String, String)] {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map_or(&[], |(_, e)| e.as_slice())
    }

    pub fn apply_section(&self, cfg: &mut PolicyConfig) -> Result<(), ConfigError> {
        let name = cfg.policy.name();
        if let Some((_, entries)) = self.sections.iter().find(|(n, _)| n == name) {
            for (k, v) in entries {
                cfg.set(k, v)?;
            }
        }
        Ok(())
    }
}
