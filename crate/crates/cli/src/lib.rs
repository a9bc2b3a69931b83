//! Command-line driver for the louiskv simulator.
//!
//! Settings resolve in this order, later sources winning: built-in defaults,
//! global keys of the `--config` file, the config section named after the
//! active policy (or subcommand), then command-line flags.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use louiskv::config::{ConfigFile, PolicyConfig};
use louiskv::engine::run_episode;
use louiskv::footprint::{memory_footprint, FootprintMethod, FootprintParams};
use louiskv::metrics::{locality_series, summarize_locality, LocalitySummary};
use louiskv::numeric::{Geometry, Real};
use louiskv::trace::{generate_trace, load_trace, write_trace, KeyLayout, SyntheticSpec, Trace};
use louiskv::{ComparisonReport, EpisodeReport};

/// Environment variable naming the directory used when `--out` is absent.
pub const OUT_DIR_ENV: &str = "LOUISKV_OUT_DIR";

pub const SWEEP_SCHEMA: &str = "louiskv.sweep/1";
pub const MEMORY_SCHEMA: &str = "louiskv.memory/1";
pub const LOCALITY_SCHEMA: &str = "louiskv.locality/1";

const DEFAULT_TAUS: [Real; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
const DEFAULT_POLICIES: &str = "louiskv,per_token_pages,fixed_stride(16),full_cache";
const DEFAULT_BUDGETS: [usize; 4] = [8, 16, 32, 64];

#[derive(Parser, Debug)]
#[command(name = "louiskv", version, about = "Trace-driven KV cache retrieval simulator")]
struct Cli {
    /// Flat key-value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trace with planted segments.
    Gen(GenArgs),
    /// Run one policy over a trace.
    Run(RunArgs),
    /// Run several policies over one trace side by side.
    Compare(CompareArgs),
    /// Run a policy over a grid of thresholds.
    SweepTau(SweepArgs),
    /// Tabulate device memory footprints over a parameter grid.
    MemReport(MemArgs),
    /// Jaccard similarity of oracle critical sets between consecutive steps.
    AnalyzeLocality(LocalityArgs),
}

#[derive(Args, Debug, Default)]
struct PolicyFlags {
    #[arg(long, value_name = "NAME")]
    policy: Option<String>,
    #[arg(long, value_name = "K")]
    stride: Option<String>,
    #[arg(long, value_name = "ENTRIES")]
    budget: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    sinks: Option<String>,
    #[arg(long, value_name = "TOKENS")]
    window: Option<String>,
    #[arg(long)]
    page_size: Option<String>,
    #[arg(long)]
    avg_cluster_size: Option<String>,
    /// Comma-separated layer indices, or `none`.
    #[arg(long, value_name = "LIST")]
    full_cache_layers: Option<String>,
    /// `shared` or `per_layer`.
    #[arg(long)]
    boundary_mode: Option<String>,
    #[arg(long)]
    boundary_layer: Option<String>,
    /// `decoupled`, `paged` or `auto`.
    #[arg(long)]
    management: Option<String>,
    #[arg(long)]
    cluster_seed: Option<String>,
    #[arg(long)]
    kmeans_max_iters: Option<String>,
    /// Bytes per second.
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long)]
    bytes_per_elem: Option<String>,
}

impl PolicyFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        [
            ("policy", &self.policy),
            ("stride", &self.stride),
            ("budget", &self.budget),
            ("tau", &self.tau),
            ("sinks", &self.sinks),
            ("window", &self.window),
            ("page_size", &self.page_size),
            ("avg_cluster_size", &self.avg_cluster_size),
            ("full_cache_layers", &self.full_cache_layers),
            ("boundary_mode", &self.boundary_mode),
            ("boundary_layer", &self.boundary_layer),
            ("management", &self.management),
            ("cluster_seed", &self.cluster_seed),
            ("kmeans_max_iters", &self.kmeans_max_iters),
            ("bandwidth", &self.bandwidth),
            ("bytes_per_elem", &self.bytes_per_elem),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Prompt length.
    #[arg(long)]
    prompt: Option<usize>,
    /// Generated length.
    #[arg(long)]
    gen: Option<usize>,
    /// Comma-separated planted segment lengths.
    #[arg(long, value_delimiter = ',')]
    segments: Option<Vec<usize>>,
    /// Number of key clusters in the prompt.
    #[arg(long)]
    clusters: Option<usize>,
    /// `sparse` or `dense`.
    #[arg(long)]
    layout: Option<String>,
    /// Query noise sigma.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    q_heads: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    key_spread: Option<f64>,
    #[arg(long)]
    query_gain: Option<f64>,
    /// Output base path; writes `<out>.manifest.json` and `<out>.bin`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Trace base path or manifest path.
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    flags: PolicyFlags,
    /// Output prefix; writes `<out>.json` and `<out>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Comma-separated policies, e.g. `louiskv,fixed_stride(16)`.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    #[command(flatten)]
    flags: PolicyFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    taus: Option<Vec<Real>>,
    #[command(flatten)]
    flags: PolicyFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MemArgs {
    /// Comma-separated subset of full_cache, quest, arkvale, louiskv.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<FootprintMethod>>,
    #[arg(long)]
    layers: Option<u64>,
    /// KV heads per layer.
    #[arg(long)]
    heads: Option<u64>,
    #[arg(long)]
    head_dim: Option<u64>,
    /// Comma-separated input lengths.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<u64>>,
    /// Comma-separated output lengths.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<u64>>,
    #[arg(long)]
    page_size: Option<u64>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    cluster_size: Option<f64>,
    #[arg(long)]
    segment_size: Option<f64>,
    #[arg(long)]
    bytes_per_elem: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LocalityArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    layer: Option<usize>,
    /// Comma-separated critical-set sizes.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Why a command failed; maps to the process exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn data(e: impl ToString) -> Failure {
    Failure::Data(e.to_string())
}

/// Parse and execute `argv` (without the program name). Returns the exit
/// code: 0 success, 1 usage error, 2 data error.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args = std::iter::once(OsString::from("louiskv")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Usage(msg) | Failure::Data(msg)) = &f;
            eprintln!("error: {msg}");
            f.code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
            ConfigFile::parse(&text).map_err(|e| data(format!("{}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Gen(a) => cmd_gen(&file, a),
        Command::Run(a) => cmd_run(&file, a),
        Command::Compare(a) => cmd_compare(&file, a),
        Command::SweepTau(a) => cmd_sweep(&file, a),
        Command::MemReport(a) => cmd_mem(&file, a),
        Command::AnalyzeLocality(a) => cmd_locality(&file, a),
    }
}

/// Resolve a policy config from defaults, the config file and flags.
/// `policy` overrides the policy named by the file and flags.
fn resolve_config(file: &ConfigFile, flags: &PolicyFlags, policy: Option<&str>) -> Result<PolicyConfig, Failure> {
    let mut cfg = PolicyConfig::default();
    for (k, v) in &file.global {
        cfg.set(k, v).map_err(data)?;
    }
    let cli = flags.pairs();
    let set_cli = |cfg: &mut PolicyConfig, keys: &[&str]| -> Result<(), Failure> {
        for (k, v) in cli.iter().filter(|(k, _)| keys.is_empty() || keys.contains(k)) {
            cfg.set(k, v).map_err(usage)?;
        }
        Ok(())
    };
    set_cli(&mut cfg, &["policy", "stride"])?;
    if let Some(p) = policy {
        cfg.set("policy", p).map_err(usage)?;
    }
    file.apply_section(&mut cfg).map_err(data)?;
    set_cli(&mut cfg, &[])?;
    if let Some(p) = policy {
        cfg.set("policy", p).map_err(usage)?;
    }
    Ok(cfg)
}

/// Flag value if given, else the value from a config section.
fn pick<T: FromStr>(cli: Option<T>, section: &[(String, String)], key: &str) -> Result<Option<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    if cli.is_some() {
        return Ok(cli);
    }
    match section.iter().rev().find(|(k, _)| k == key) {
        Some((_, v)) => v
            .parse()
            .map(Some)
            .map_err(|e| data(format!("config key `{key}` = `{v}`: {e}"))),
        None => Ok(None),
    }
}

fn pick_list<T: FromStr>(
    cli: Option<Vec<T>>,
    section: &[(String, String)],
    key: &str,
) -> Result<Option<Vec<T>>, Failure>
where
    T::Err: std::fmt::Display,
{
    if cli.is_some() {
        return Ok(cli);
    }
    match section.iter().rev().find(|(k, _)| k == key) {
        Some((_, v)) => v
            .split(',')
            .map(|s| s.trim().parse::<T>())
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|e| data(format!("config key `{key}` = `{v}`: {e}"))),
        None => Ok(None),
    }
}

fn out_base(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(default_name)
    })
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), Failure> {
    let io = |e: std::io::Error| data(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = with_suffix(path, ".tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents.as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn write_pair(base: &Path, json: &str, csv: &str) -> Result<(), Failure> {
    let (jp, cp) = (with_suffix(base, ".json"), with_suffix(base, ".csv"));
    write_atomic(&jp, json)?;
    write_atomic(&cp, csv)?;
    println!("wrote {}", jp.display());
    println!("wrote {}", cp.display());
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn load(path: &Path) -> Result<Trace, Failure> {
    load_trace(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn cmd_gen(file: &ConfigFile, a: GenArgs) -> Result<(), Failure> {
    let sec = file.section("gen");
    let d = SyntheticSpec::default();
    let layout = match pick(a.layout, sec, "layout")?.as_deref() {
        None => d.key_layout,
        Some("sparse") => KeyLayout::Sparse,
        Some("dense") => KeyLayout::Dense,
        Some(other) => return Err(usage(format!("layout `{other}`: expected sparse or dense"))),
    };
    let g = d.geometry;
    let spec = SyntheticSpec {
        seed: pick(a.seed, sec, "seed")?.unwrap_or(d.seed),
        prompt_len: pick(a.prompt, sec, "prompt")?.unwrap_or(d.prompt_len),
        gen_len: pick(a.gen, sec, "gen")?.unwrap_or(d.gen_len),
        segment_lengths: pick_list(a.segments, sec, "segments")?.unwrap_or(d.segment_lengths),
        key_cluster_count: pick(a.clusters, sec, "clusters")?.unwrap_or(d.key_cluster_count),
        key_layout: layout,
        noise_sigma: pick(a.noise, sec, "noise")?.unwrap_or(d.noise_sigma),
        geometry: Geometry {
            num_layers: pick(a.layers, sec, "layers")?.unwrap_or(g.num_layers),
            num_q_heads: pick(a.q_heads, sec, "q_heads")?.unwrap_or(g.num_q_heads),
            num_kv_heads: pick(a.kv_heads, sec, "kv_heads")?.unwrap_or(g.num_kv_heads),
            head_dim: pick(a.head_dim, sec, "head_dim")?.unwrap_or(g.head_dim),
        },
        key_spread: pick(a.key_spread, sec, "key_spread")?.unwrap_or(d.key_spread),
        query_gain: pick(a.query_gain, sec, "query_gain")?.unwrap_or(d.query_gain),
    };
    spec.validate().map_err(usage)?;
    let trace = generate_trace(&spec).map_err(data)?;
    let base = out_base(a.out, "trace");
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
    }
    let (m, p) = write_trace(&trace, &base).map_err(data)?;
    println!("wrote {}", m.display());
    println!("wrote {}", p.display());
    Ok(())
}

fn cmd_run(file: &ConfigFile, a: RunArgs) -> Result<(), Failure> {
    let cfg = resolve_config(file, &a.flags, None)?;
    let trace = load(&a.trace)?;
    let r = run_episode(&trace, &cfg).map_err(data)?;
    print_episode(&r);
    write_pair(&out_base(a.out, "run"), &r.to_json(), &r.to_csv())
}

fn print_episode(r: &EpisodeReport) {
    println!(
        "{}: retrievals={} mean_recall={:.6} mean_output_rel_error={:.6e} fetch_bytes={} transfer_s={:.6e}",
        r.config.policy,
        r.retrieval_count,
        r.mean_recall,
        r.mean_output_rel_error,
        r.ledger.fetch_bytes,
        r.ledger.modeled_transfer_seconds
    );
}

fn cmd_compare(file: &ConfigFile, a: CompareArgs) -> Result<(), Failure> {
    if a.flags.policy.is_some() {
        return Err(usage("compare takes --policies, not --policy"));
    }
    let policies = match pick_list(a.policies, file.section("compare"), "policies")? {
        Some(p) => p,
        None => DEFAULT_POLICIES.split(',').map(String::from).collect(),
    };
    if policies.len() < 2 {
        return Err(usage("compare needs at least two policies"));
    }
    let configs = policies
        .iter()
        .map(|p| resolve_config(file, &a.flags, Some(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let trace = load(&a.trace)?;
    let reports = configs
        .par_iter()
        .map(|c| run_episode(&trace, c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(data)?;
    reports.iter().for_each(print_episode);
    let c = ComparisonReport::from_reports(&trace, &reports);
    write_pair(&out_base(a.out, "compare"), &c.to_json(), &c.to_csv())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    tau: Real,
    retrieval_count: usize,
    mean_recall: Real,
    min_recall: Real,
    mean_output_rel_error: Real,
    fetch_bytes: u64,
    fetch_ops: u64,
    modeled_transfer_seconds: f64,
    sealed_segments: usize,
    mean_segment_size: Option<Real>,
}

#[derive(Debug, Serialize)]
struct SweepReport {
    schema: &'static str,
    trace_fingerprint: String,
    config: PolicyConfig,
    rows: Vec<SweepRow>,
}

impl SweepReport {
    fn to_csv(&self) -> String {
        let mut out = format!("# schema: {SWEEP_SCHEMA}\n");
        out.push_str("tau,retrieval_count,mean_recall,min_recall,mean_output_rel_error,fetch_bytes,fetch_ops,modeled_transfer_seconds,sealed_segments,mean_segment_size\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.tau,
                r.retrieval_count,
                r.mean_recall,
                r.min_recall,
                r.mean_output_rel_error,
                r.fetch_bytes,
                r.fetch_ops,
                r.modeled_transfer_seconds,
                r.sealed_segments,
                r.mean_segment_size.map(|v| v.to_string()).unwrap_or_default()
            )
            .unwrap();
        }
        out
    }
}

fn cmd_sweep(file: &ConfigFile, a: SweepArgs) -> Result<(), Failure> {
    let taus = pick_list(a.taus, file.section("sweep_tau"), "taus")?.unwrap_or_else(|| DEFAULT_TAUS.to_vec());
    if taus.is_empty() || taus.iter().any(|t| !t.is_finite()) {
        return Err(usage("taus must be finite"));
    }
    let base = resolve_config(file, &a.flags, None)?;
    let trace = load(&a.trace)?;
    let reports = taus
        .par_iter()
        .map(|&tau| {
            let cfg = PolicyConfig { tau, ..base.clone() };
            run_episode(&trace, &cfg)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(data)?;
    let rows = reports
        .iter()
        .map(|r| SweepRow {
            tau: r.config.tau,
            retrieval_count: r.retrieval_count,
            mean_recall: r.mean_recall,
            min_recall: r.min_recall,
            mean_output_rel_error: r.mean_output_rel_error,
            fetch_bytes: r.ledger.fetch_bytes,
            fetch_ops: r.ledger.fetch_ops,
            modeled_transfer_seconds: r.ledger.modeled_transfer_seconds,
            sealed_segments: r.sealed_segments,
            mean_segment_size: r.mean_segment_size,
        })
        .collect::<Vec<_>>();
    for r in &rows {
        println!(
            "tau={} retrievals={} mean_recall={:.6}",
            r.tau, r.retrieval_count, r.mean_recall
        );
    }
    let report = SweepReport {
        schema: SWEEP_SCHEMA,
        trace_fingerprint: format!("{:08x}", trace.fingerprint()),
        config: base,
        rows,
    };
    write_pair(&out_base(a.out, "sweep_tau"), &to_json(&report), &report.to_csv())
}

#[derive(Debug, Serialize)]
struct MemRow {
    method: FootprintMethod,
    input_len: u64,
    output_len: u64,
    footprint_bytes: f64,
    footprint_gib: f64,
}

#[derive(Debug, Serialize)]
struct MemReport {
    schema: &'static str,
    params: FootprintParams,
    rows: Vec<MemRow>,
}

fn cmd_mem(file: &ConfigFile, a: MemArgs) -> Result<(), Failure> {
    let sec = file.section("mem_report");
    let d = FootprintParams::default();
    let methods = pick_list(a.methods, sec, "methods")?.unwrap_or_else(|| FootprintMethod::ALL.to_vec());
    let ns = pick_list(a.n, sec, "n")?.unwrap_or_else(|| vec![4096, 16384, 32768]);
    let ms = pick_list(a.m, sec, "m")?.unwrap_or_else(|| vec![512, 4096, 16384]);
    let params = FootprintParams {
        layers: pick(a.layers, sec, "layers")?.unwrap_or(d.layers),
        heads: pick(a.heads, sec, "heads")?.unwrap_or(d.heads),
        head_dim: pick(a.head_dim, sec, "head_dim")?.unwrap_or(d.head_dim),
        page_size: pick(a.page_size, sec, "page_size")?.unwrap_or(d.page_size),
        budget: pick(a.budget, sec, "budget")?.unwrap_or(d.budget),
        cluster_size: pick(a.cluster_size, sec, "cluster_size")?.unwrap_or(d.cluster_size),
        segment_size: pick(a.segment_size, sec, "segment_size")?.unwrap_or(d.segment_size),
        bytes_per_elem: pick(a.bytes_per_elem, sec, "bytes_per_elem")?.unwrap_or(d.bytes_per_elem),
        ..d
    };
    let positive = |x: f64| x.is_finite() && x > 0.0;
    if params.page_size == 0 || !positive(params.cluster_size) || !positive(params.segment_size) {
        return Err(usage("page, cluster and segment sizes must be positive"));
    }
    let mut rows = Vec::new();
    for &n in &ns {
        for &m in &ms {
            let p = FootprintParams { n, m, ..params };
            for &method in &methods {
                let bytes = memory_footprint(method, &p);
                rows.push(MemRow {
                    method,
                    input_len: n,
                    output_len: m,
                    footprint_bytes: bytes,
                    footprint_gib: bytes / (1u64 << 30) as f64,
                });
            }
        }
    }
    let mut csv = format!("# schema: {MEMORY_SCHEMA}\nmethod,input_len,output_len,footprint_bytes,footprint_gib\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.method, r.input_len, r.output_len, r.footprint_bytes, r.footprint_gib
        )
        .unwrap();
    }
    print!("{}", csv.lines().skip(1).collect::<Vec<_>>().join("\n"));
    println!();
    let report = MemReport {
        schema: MEMORY_SCHEMA,
        params,
        rows,
    };
    write_pair(&out_base(a.out, "mem_report"), &to_json(&report), &csv)
}

#[derive(Debug, Serialize)]
struct LocalityReport {
    schema: &'static str,
    trace_fingerprint: String,
    layer: usize,
    segment_starts: Vec<usize>,
    summaries: Vec<LocalitySummary>,
    /// `series[i][t - 1]`: Jaccard between steps `t - 1` and `t` at `budgets[i]`.
    series: Vec<Vec<Option<Real>>>,
}

fn cmd_locality(file: &ConfigFile, a: LocalityArgs) -> Result<(), Failure> {
    let sec = file.section("analyze_locality");
    let layer = pick(a.layer, sec, "layer")?.unwrap_or(0);
    let budgets = pick_list(a.budgets, sec, "budgets")?.unwrap_or_else(|| DEFAULT_BUDGETS.to_vec());
    if budgets.is_empty() || budgets.contains(&0) {
        return Err(usage("budgets must be positive"));
    }
    let trace = load(&a.trace)?;
    if layer >= trace.geometry.num_layers {
        return Err(data(format!(
            "layer {layer} out of range for a {}-layer trace",
            trace.geometry.num_layers
        )));
    }
    let series = budgets
        .par_iter()
        .map(|&b| locality_series(&trace, layer, b))
        .collect::<Result<Vec<_>, _>>()
        .map_err(data)?;
    let starts = trace.annotations.segment_starts.clone();
    let summaries: Vec<_> = budgets
        .iter()
        .zip(&series)
        .map(|(&b, s)| summarize_locality(s, &starts, b))
        .collect();
    let fmt = |x: Option<Real>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for s in &summaries {
        println!(
            "budget={} within_segment_mean={} cross_boundary_mean={}",
            s.budget,
            fmt(s.within_mean),
            fmt(s.cross_mean)
        );
    }
    let mut csv = format!("# schema: {LOCALITY_SCHEMA}\nstep,segment_start");
    for b in &budgets {
        write!(csv, ",jaccard_budget_{b}").unwrap();
    }
    csv.push('\n');
    for t in 1..=trace.gen_len {
        write!(csv, "{t},{}", starts.contains(&t) as u8).unwrap();
        for s in &series {
            write!(csv, ",{}", s[t - 1].map(|v| v.to_string()).unwrap_or_default()).unwrap();
        }
        csv.push('\n');
    }
    let report = LocalityReport {
        schema: LOCALITY_SCHEMA,
        trace_fingerprint: format!("{:08x}", trace.fingerprint()),
        layer,
        segment_starts: starts,
        summaries,
        series,
    };
    write_pair(&out_base(a.out, "locality"), &to_json(&report), &csv)
}
