//! Command-line entry point: config parsing, overrides, caching, output layout and exit codes.
//!
//! Exit codes: 0 pass, 1 fail, 2 config or usage error, 3 numeric failure.

mod invariants;

pub use invariants::{run_invariants, InvariantOptions, InvariantResult, MODULES};

use crate::cone::{tabulate, ConeKernelParams};
use crate::error::{Error, Result};
use crate::geometry::BaseGrid;
use crate::harness::{run_iterated_limit_on, BookkeepingReport, ExperimentConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const MANIFEST_SCHEMA: &str = "collapse-heat/manifest/v1";
pub const CACHE_ENV: &str = "COLLAPSE_HEAT_CACHE";
pub const DEFAULT_CONFIG: &str = include_str!("../../configs/default.json");
pub const NEGATIVE_CONTROL_CONFIG: &str = include_str!("../../configs/negative_control.json");

#[derive(Parser, Debug)]
#[command(name = "collapse-heat", version, about = "Heat flow under collapsing torus fibrations over conic bases")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON); the bundled default when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for the collapse steps (0 = available parallelism).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Perturbation seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-path override, e.g. `fiber.n_f=8` (repeatable; values are JSON or bare strings).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the iterated-limit experiment and write report + manifest.
    Run(Common),
    /// Cartesian sweep over `|`-separated override alternatives.
    Sweep(Common),
    /// Run invariant suites on a small model derived from the config.
    CheckInvariants {
        #[command(flatten)]
        common: Common,
        /// Modules to check (repeatable): geometry, assembly, heat, ident, cone, renorm, all.
        #[arg(long = "module", default_value = "all")]
        modules: Vec<String>,
        /// Scale the lift coefficients by 1.01 (negative control).
        #[arg(long)]
        break_normalization: bool,
    },
    /// Tabulate the flat-cone heat kernel as CSV.
    ConeKernel {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        tau: f64,
        /// Point pair `r,theta,rp,thetap` (repeatable).
        #[arg(long = "point", value_name = "R,THETA,RP,THETAP")]
        points: Vec<String>,
        /// n×n grid of (r', Δθ) ∈ (0, 2r] × [0, π] around the base point.
        #[arg(long)]
        grid: Option<usize>,
        /// Base point `r,theta` for --grid.
        #[arg(long, default_value = "0.5,0")]
        base: String,
        #[arg(long, default_value_t = 2000)]
        max_terms: usize,
        #[arg(long, default_value_t = 1e-13)]
        series_tol: f64,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Config { .. } | Error::Json(_) | Error::Io(_) | Error::DimensionMismatch { .. } => {
            EXIT_CONFIG
        }
        Error::NotPositiveDefinite { .. } | Error::DimensionCap { .. } | Error::Convergence { .. } | Error::Linalg(_) => {
            EXIT_NUMERIC
        }
    }
}

/// Parse and dispatch; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Sweep(c) => cmd_sweep(&c),
        Command::CheckInvariants { common, modules, break_normalization } => {
            cmd_check_invariants(&common, &modules, break_normalization)
        }
        Command::ConeKernel { alpha, tau, points, grid, base, max_terms, series_tol, out } => {
            cmd_cone_kernel(alpha, tau, &points, grid, &base, max_terms, series_tol, out.as_deref())
        }
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn config_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.into(), msg: msg.into() }
}

/// Split `KEY=VALUE` overrides; a key given twice is a conflict.
pub fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for o in raw {
        let (k, v) = o.split_once('=').ok_or_else(|| config_err(o, "override must be KEY=VALUE"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(config_err(o, "empty override key"));
        }
        if seen.insert(k.to_string(), ()).is_some() {
            return Err(config_err(k, "conflicting override: key given more than once"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// Set an existing dotted path (array indices allowed) in a JSON tree.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let next = match cur {
            Value::Object(m) => {
                if !m.contains_key(*p) {
                    if last && is_optional_key(&parts[..=i]) {
                        m.insert(p.to_string(), Value::Null);
                    } else {
                        return Err(config_err(key, format!("unknown key `{p}`")));
                    }
                }
                m.get_mut(*p).unwrap()
            }
            Value::Array(a) => {
                let idx: usize = p.parse().map_err(|_| config_err(key, format!("`{p}` is not an array index")))?;
                let n = a.len();
                a.get_mut(idx).ok_or_else(|| config_err(key, format!("index {idx} out of range ({n})")))?
            }
            _ => return Err(config_err(key, format!("`{p}` indexes into a scalar"))),
        };
        if last {
            *next = value;
            return Ok(());
        }
        cur = next;
    }
    Ok(())
}

fn is_optional_key(path: &[&str]) -> bool {
    matches!(path, ["renorm_rhos"] | ["krylov"] | ["cutoff"] | ["refinement_floor"] | ["perturbation", "profile"])
}

fn read_config_value(common: &Common) -> Result<Value> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| config_err(&p.display().to_string(), e.to_string()))?,
        None => DEFAULT_CONFIG.to_string(),
    };
    serde_json::from_str(&text).map_err(|e| config_err(&format!("line {} column {}", e.line(), e.column()), e.to_string()))
}

fn finish_config(mut v: Value, overrides: &[(String, String)], seed: Option<u64>) -> Result<(ExperimentConfig, Value)> {
    for (k, val) in overrides {
        apply_override(&mut v, k, parse_value(val))?;
    }
    if let Some(s) = seed {
        apply_override(&mut v, "perturbation.seed", Value::from(s))?;
    }
    let cfg = ExperimentConfig::from_json_str(&v.to_string())?;
    Ok((cfg, v))
}

/// Load a config with overrides and `--seed` applied.
pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let ov = parse_overrides(&common.overrides)?;
    Ok(finish_config(read_config_value(common)?, &ov, common.seed)?.0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical (sorted-key, compact) JSON form.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let v: Value = serde_json::to_value(cfg)?;
    Ok(hex(&Sha256::digest(canonical_json(&v).as_bytes())))
}

pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let sorted: BTreeMap<&String, &Value> = m.iter().collect();
            let body: Vec<String> = sorted
                .iter()
                .map(|(k, v)| format!("{}:{}", Value::String((*k).clone()), canonical_json(v)))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        _ => v.to_string(),
    }
}

pub fn sha256_file(p: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(p)?)))
}

fn cache_dir(out: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| out.join(".cache"))
}

/// Base grid from the cache, keyed by the hash of (tool version, cone, grid spec).
pub fn cached_grid(cfg: &ExperimentConfig, out: &Path) -> Result<(BaseGrid, bool)> {
    let key = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "cone": cfg.cone,
        "base_grid": cfg.base_grid,
    });
    let h = hex(&Sha256::digest(canonical_json(&key).as_bytes()));
    let dir = cache_dir(out);
    let path = dir.join(format!("grid_{}.json", &h[..16]));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(g) = serde_json::from_str::<Value>(&text).map_err(Error::from).and_then(|v| BaseGrid::from_json(&v)) {
            if g.params == cfg.cone && g.r_min == cfg.base_grid.r_min {
                return Ok((g, true));
            }
        }
    }
    let g = cfg.base_grid.build(cfg.cone)?;
    std::fs::create_dir_all(&dir)?;
    write_atomic(&path, &serde_json::to_string(&g.to_json())?)?;
    Ok((g, false))
}

pub fn write_atomic(path: &Path, body: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub config_hash: String,
    pub report_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub cache_hit: bool,
    pub outputs: Vec<String>,
    /// Pass/fail per verdict component.
    pub checks: BTreeMap<String, bool>,
    pub pass: bool,
}

fn checks_of(r: &BookkeepingReport) -> BTreeMap<String, bool> {
    let mut c = BTreeMap::new();
    c.insert("limsup_monotone".into(), r.verdict.limsups_monotone);
    c.insert("interior_decays".into(), r.verdict.interior_decays);
    c.insert("final_within_bound".into(), r.verdict.final_within_bound);
    c.insert("bookkeeping_bound_fraction".into(), r.bound_fraction >= crate::harness::BOUND_FRACTION);
    c.insert("mixed_ceiling".into(), r.mixed_ceiling_violations.is_empty());
    c.insert("bilinearization".into(), r.max_bilinear_defect <= 1e-10 * r.base_pairing.iter().fold(1.0f64, |m, x| m.max(x.abs())));
    c.insert("corollary_decreasing".into(), r.corollary.decreasing);
    c
}

/// Run one config into `out`; returns the report and manifest.
pub fn run_into(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<(BookkeepingReport, RunManifest)> {
    let started = now();
    std::fs::create_dir_all(out)?;
    let (grid, hit) = cached_grid(cfg, out)?;
    let threads = if threads == 0 { std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1) } else { threads };
    let report = run_iterated_limit_on(cfg, grid, threads)?;
    let paths = report.write(out)?;
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash(cfg)?,
        report_hash: sha256_file(&out.join("report.json"))?,
        started_unix: started,
        finished_unix: now(),
        cache_hit: hit,
        outputs: paths.iter().map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string()).collect(),
        checks: checks_of(&report),
        pass: report.verdict.pass,
    };
    write_atomic(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok((report, manifest))
}

fn summarize(name: &str, r: &BookkeepingReport) {
    let v = &r.verdict;
    println!(
        "{name}: {} (final |K_t - K^ren| = {:.3e}, estimate {:.3e}{})",
        if v.pass { "PASS" } else { "FAIL" },
        v.final_value,
        v.final_estimate,
        v.blamed.map(|c| format!(", blamed channel: {c:?}")).unwrap_or_default()
    );
    for reason in &v.reasons {
        println!("  {reason}");
    }
}

pub fn cmd_run(common: &Common) -> Result<i32> {
    let cfg = load_config(common)?;
    let (report, _) = run_into(&cfg, &common.out, common.threads)?;
    summarize(&cfg.name, &report);
    Ok(if report.verdict.pass { EXIT_PASS } else { EXIT_FAIL })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepEntry {
    pub label: String,
    pub dir: String,
    pub overrides: BTreeMap<String, Value>,
    pub config_hash: String,
    pub pass: bool,
    pub final_value: f64,
    pub value_floor: Option<f64>,
    pub base_pairing: Vec<f64>,
}

pub fn cmd_sweep(common: &Common) -> Result<i32> {
    let ov = parse_overrides(&common.overrides)?;
    let base = read_config_value(common)?;
    let axes: Vec<(String, Vec<String>)> =
        ov.iter().map(|(k, v)| (k.clone(), v.split('|').map(|s| s.trim().to_string()).collect())).collect();
    if axes.iter().all(|(_, vs)| vs.len() == 1) {
        let (cfg, _) = finish_config(base, &ov, common.seed)?;
        let (report, _) = run_into(&cfg, &common.out, common.threads)?;
        summarize(&cfg.name, &report);
        return Ok(if report.verdict.pass { EXIT_PASS } else { EXIT_FAIL });
    }
    // validate every combination before running any
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vs) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| vs.iter().map(move |v| [c.clone(), vec![(k.clone(), v.clone())]].concat()))
            .collect();
    }
    let cfgs = combos.iter().map(|c| finish_config(base.clone(), c, common.seed).map(|x| x.0)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&common.out)?;
    let mut entries = Vec::new();
    let mut all_pass = true;
    for (i, (combo, cfg)) in combos.iter().zip(&cfgs).enumerate() {
        let label: String = combo.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",");
        let dir = format!("run_{i:03}");
        let (report, manifest) = run_into(cfg, &common.out.join(&dir), common.threads)?;
        summarize(&label, &report);
        all_pass &= report.verdict.pass;
        entries.push(SweepEntry {
            label,
            dir,
            overrides: combo.iter().map(|(k, v)| (k.clone(), parse_value(v))).collect(),
            config_hash: manifest.config_hash,
            pass: report.verdict.pass,
            final_value: report.verdict.final_value,
            value_floor: report.floor.as_ref().map(|f| f.value_floor),
            base_pairing: report.base_pairing.clone(),
        });
    }
    let merged = serde_json::json!({ "schema": "collapse-heat/sweep/v1", "runs": entries });
    write_atomic(&common.out.join("sweep.json"), &serde_json::to_string_pretty(&merged)?)?;
    let mut csv = String::from("run,label,pass,final_value,value_floor\n");
    for e in &entries {
        csv.push_str(&format!("{},\"{}\",{},{:.10e},{:.10e}\n", e.dir, e.label, e.pass, e.final_value, e.value_floor.unwrap_or(f64::NAN)));
    }
    std::fs::write(common.out.join("sweep.csv"), csv)?;
    std::fs::create_dir_all(common.out.join("plots"))?;
    std::fs::write(
        common.out.join("plots").join("sweep.gp"),
        "set terminal pngcairo size 900,600\nset output 'sweep.png'\nset logscale y\nset datafile separator ','\n\
set xlabel 'run'\nset ylabel 'final discrepancy'\n\
plot '../sweep.csv' every ::1 using 0:4 with linespoints title 'final', '' every ::1 using 0:5 with linespoints title 'floor'\n",
    )?;
    let manifest = serde_json::json!({
        "schema": MANIFEST_SCHEMA,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "finished_unix": now(),
        "runs": entries.iter().map(|e| serde_json::json!({"dir": e.dir, "config_hash": e.config_hash, "pass": e.pass})).collect::<Vec<_>>(),
        "pass": all_pass,
    });
    write_atomic(&common.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(if all_pass { EXIT_PASS } else { EXIT_FAIL })
}

pub fn cmd_check_invariants(common: &Common, modules: &[String], break_normalization: bool) -> Result<i32> {
    let cfg = load_config(common)?;
    let mut selected = Vec::new();
    for m in modules {
        if m == "all" {
            selected.extend(MODULES.iter().map(|s| s.to_string()));
        } else if MODULES.contains(&m.as_str()) {
            selected.push(m.clone());
        } else {
            return Err(config_err("module", format!("unknown module `{m}`; expected one of {MODULES:?} or all")));
        }
    }
    selected.dedup();
    let opts = InvariantOptions { break_normalization, seed: common.seed.unwrap_or(cfg.perturbation.seed) };
    let results = run_invariants(&cfg, &selected, &opts)?;
    println!("{:<36} {:<6} {:>12} {:>12}", "invariant", "status", "value", "limit");
    for r in &results {
        println!("{:<36} {:<6} {:>12.3e} {:>12.3e}", r.id, if r.pass { "PASS" } else { "FAIL" }, r.value, r.limit);
    }
    if common.out != Path::new("out") || common.out.exists() {
        std::fs::create_dir_all(&common.out)?;
        write_atomic(&common.out.join("invariants.json"), &serde_json::to_string_pretty(&results)?)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.id.as_str()).collect();
    if failed.is_empty() {
        Ok(EXIT_PASS)
    } else {
        eprintln!("failing invariants: {}", failed.join(", "));
        Ok(EXIT_FAIL)
    }
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_err(what, format!("cannot parse `{s}`")))?;
    if v.len() != n {
        return Err(config_err(what, format!("expected {n} comma-separated numbers, got `{s}`")));
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_cone_kernel(
    alpha: f64,
    tau: f64,
    points: &[String],
    grid: Option<usize>,
    base: &str,
    max_terms: usize,
    series_tol: f64,
    out: Option<&Path>,
) -> Result<i32> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(config_err("tau", format!("must be > 0, got {tau}")));
    }
    let params = ConeKernelParams { alpha, series_tol, max_terms };
    params.validate()?;
    let mut pts = Vec::new();
    for p in points {
        let v = parse_floats(p, 4, "point")?;
        pts.push((v[0], v[1], v[2], v[3]));
    }
    if let Some(n) = grid {
        if n < 2 {
            return Err(config_err("grid", "need n >= 2"));
        }
        let b = parse_floats(base, 2, "base")?;
        for i in 1..=n {
            let rp = 2.0 * b[0] * i as f64 / n as f64;
            for j in 0..n {
                let dt = std::f64::consts::PI * j as f64 / (n - 1) as f64;
                pts.push((b[0], b[1], rp, b[1] + dt));
            }
        }
    }
    if pts.is_empty() {
        return Err(config_err("point", "give --point or --grid"));
    }
    if pts.iter().any(|p| !(p.0 > 0.0 && p.2 > 0.0)) {
        return Err(config_err("point", "radii must be > 0"));
    }
    let csv = tabulate(&params, &pts, tau)?;
    match out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(EXIT_PASS)
}
