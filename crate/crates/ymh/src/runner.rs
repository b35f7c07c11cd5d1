//! Experiment driver behind the command-line tool: flat key=value configs,
//! one pipeline per subcommand, CSV and JSON writers and the run manifest.
//!
//! Every float written by this module carries 17 significant digits, so an
//! artifact read back reproduces the in-memory value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::{json, Value};

use crate::acceptance::{run_suite, scan_groups, SuiteOptions};
use crate::error::{Error, Result};
use crate::geometry::{build_domain, coarse_structure, describe, enumerate_connected_sets, Coord};
use crate::mcmc::{decay_fit, run_grouped_experiment, RunSettings};
use crate::model::ModelParams;
use crate::oracle::{decomposition_check, IntegrationPlan, Method};
use crate::polymer::{kp_condition_check, random_table, truncated_log_z, CoarseLattice, PolymerWeightTable};
use crate::proca::{covariance_scan, spectral_ceiling, standard_decay_pairs, ProcaFamily};

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Overrides the `workers` key when set.
pub const WORKERS_ENV: &str = "YMH_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Geometry,
    Proca,
    Simulate,
    Expand,
    Oracle,
    Verify,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Geometry => "geometry",
            Experiment::Proca => "proca",
            Experiment::Simulate => "simulate",
            Experiment::Expand => "expand",
            Experiment::Oracle => "oracle",
            Experiment::Verify => "verify",
        }
    }
}

/// The resolved configuration of one run. Field order is the order the
/// manifest echoes them in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub d: usize,
    pub n: i64,
    pub block_side: i64,
    pub beta: f64,
    pub m: f64,
    pub sweeps: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub chains: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub r: f64,
    pub n_max: usize,
    pub support_cap: usize,
    /// Largest distance in covariance and correlation scans.
    pub kmax: i64,
    /// Translates averaged each way along the first axis per scan distance.
    pub reach: i64,
    pub method: Method,
    pub nodes: usize,
    pub samples: usize,
    /// Largest face set kept by the oracle; 0 keeps all.
    pub max_face_set: usize,
    /// Weight table JSON for `expand`; empty draws a synthetic table.
    pub table: String,
    pub table_count: usize,
    pub table_side: i64,
    pub table_max_size: usize,
    /// ‖w‖_{r+2} of the synthetic table.
    pub table_norm: f64,
    pub animal_k: usize,
    pub stability_samples: usize,
    pub out: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
}

pub const KEYS: &[&str] = &[
    "d",
    "n",
    "block_side",
    "beta",
    "m",
    "sweeps",
    "burn_in",
    "thin",
    "chains",
    "seed",
    "checkpoint_every",
    "r",
    "n_max",
    "support_cap",
    "kmax",
    "reach",
    "method",
    "nodes",
    "samples",
    "max_face_set",
    "table",
    "table_count",
    "table_side",
    "table_max_size",
    "table_norm",
    "animal_k",
    "stability_samples",
    "out",
    "workers",
];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e| config_err(format!("`{key}`: cannot parse `{raw}`: {e}")))
}

impl RunConfig {
    /// Defaults for one subcommand. `verify` defaults to the full acceptance
    /// sizes; `oracle` to the four-block instance at β = 10⁴.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut c = RunConfig {
            experiment,
            d: 2,
            n: 8,
            block_side: 2,
            beta: 8.0,
            m: 1.0,
            sweeps: 20_000,
            burn_in: 2_000,
            thin: 1,
            chains: 2,
            seed: 1,
            checkpoint_every: 1_000,
            r: 0.5,
            n_max: 6,
            support_cap: 6,
            kmax: 10,
            reach: 5,
            method: Method::MonteCarlo,
            nodes: 8,
            samples: 200_000,
            max_face_set: 0,
            table: String::new(),
            table_count: 5,
            table_side: 3,
            table_max_size: 2,
            table_norm: 0.1,
            animal_k: 8,
            stability_samples: 1_000_000,
            out: PathBuf::from("out"),
            workers: 0,
        };
        match experiment {
            Experiment::Oracle => {
                c.n = 1;
                c.beta = 1e4;
                c.seed = 7;
            }
            Experiment::Verify => {
                let s = SuiteOptions::default();
                c.seed = s.seed;
                c.sweeps = s.sweeps;
                c.burn_in = s.burn_in;
                c.chains = s.chains;
                c.n_max = s.n_max;
                c.stability_samples = s.stability_samples;
            }
            _ => {}
        }
        c
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "d" => self.d = parse_value(key, raw)?,
            "n" => self.n = parse_value(key, raw)?,
            "block_side" => self.block_side = parse_value(key, raw)?,
            "beta" => self.beta = parse_value(key, raw)?,
            "m" => self.m = parse_value(key, raw)?,
            "sweeps" => self.sweeps = parse_value(key, raw)?,
            "burn_in" => self.burn_in = parse_value(key, raw)?,
            "thin" => self.thin = parse_value(key, raw)?,
            "chains" => self.chains = parse_value(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, raw)?,
            "r" => self.r = parse_value(key, raw)?,
            "n_max" => self.n_max = parse_value(key, raw)?,
            "support_cap" => self.support_cap = parse_value(key, raw)?,
            "kmax" => self.kmax = parse_value(key, raw)?,
            "reach" => self.reach = parse_value(key, raw)?,
            "method" => {
                self.method = match raw {
                    "quadrature" => Method::TensorQuadrature,
                    "monte-carlo" => Method::MonteCarlo,
                    _ => return Err(config_err(format!("`method` must be quadrature or monte-carlo, got `{raw}`"))),
                }
            }
            "nodes" => self.nodes = parse_value(key, raw)?,
            "samples" => self.samples = parse_value(key, raw)?,
            "max_face_set" => self.max_face_set = parse_value(key, raw)?,
            "table" => self.table = raw.to_string(),
            "table_count" => self.table_count = parse_value(key, raw)?,
            "table_side" => self.table_side = parse_value(key, raw)?,
            "table_max_size" => self.table_max_size = parse_value(key, raw)?,
            "table_norm" => self.table_norm = parse_value(key, raw)?,
            "animal_k" => self.animal_k = parse_value(key, raw)?,
            "stability_samples" => self.stability_samples = parse_value(key, raw)?,
            "out" => self.out = PathBuf::from(raw),
            "workers" => self.workers = parse_value(key, raw)?,
            _ => return Err(config_err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the subcommand defaults. Blank lines
    /// and lines starting with `#` are skipped; repeated keys are errors.
    pub fn parse(experiment: Experiment, text: &str) -> Result<Self> {
        let mut cfg = Self::defaults(experiment);
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(config_err(format!("line {}: key `{key}` given twice", i + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config(msg) => config_err(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(experiment: Experiment, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(experiment, &text)
    }

    fn model(&self) -> Result<ModelParams> {
        ModelParams::new(self.d, self.n, self.block_side, self.beta, self.m)
    }

    fn settings(&self) -> RunSettings {
        RunSettings {
            sweeps: self.sweeps,
            burn_in: self.burn_in,
            thin: self.thin,
            chains: self.chains,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// Worker threads after the environment override.
    pub fn resolved_workers(&self) -> Result<usize> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => v.trim().parse().map_err(|e| config_err(format!("{WORKERS_ENV}=`{v}`: {e}"))),
            Err(_) => Ok(self.workers),
        }
    }
}

/// Writes floats as `{:.16e}`: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// Pretty JSON with every float at 17 significant digits. Non-finite floats
/// become null.
struct Sig17<'a>(PrettyFormatter<'a>);

impl Formatter for Sig17<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| Error::Io(io::Error::other(e)))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// A table cell: integers and text as given, floats at 17 digits.
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) => fmt_f64(*x),
            Cell::Text(s) => s.clone(),
        }
    }
}

pub fn csv_string(header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(Cell::render).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn sites_label(sites: &[Coord]) -> String {
    let mut s = String::new();
    for (i, c) in sites.iter().enumerate() {
        if i > 0 {
            s.push('|');
        }
        let coords: Vec<String> = c.iter().map(i64::to_string).collect();
        let _ = write!(s, "{}", coords.join(" "));
    }
    s
}

/// Files of one run, written into `dir` in the order produced.
struct Artifacts {
    dir: PathBuf,
    names: Vec<String>,
}

impl Artifacts {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        self.names.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, &to_json_string(value)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    /// Every in-run check passed.
    pub passed: bool,
    pub summary: Vec<String>,
    pub artifacts: Vec<String>,
    pub out_dir: PathBuf,
}

/// Runs one experiment and writes its artifacts plus `manifest.json`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let workers = cfg.resolved_workers()?;
    fs::create_dir_all(&cfg.out)?;
    let mut art = Artifacts { dir: cfg.out.clone(), names: Vec::new() };
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| config_err(format!("cannot start {workers} workers: {e}")))?;
    let (passed, summary, diagnostics) = pool.install(|| match cfg.experiment {
        Experiment::Geometry => geometry(cfg, &mut art),
        Experiment::Proca => proca(cfg, &mut art),
        Experiment::Simulate => simulate(cfg, &mut art),
        Experiment::Expand => expand(cfg, &mut art),
        Experiment::Oracle => oracle(cfg, &mut art),
        Experiment::Verify => verify(cfg, &mut art),
    })?;
    let manifest = json!({
        "schema_version": OUTPUT_SCHEMA_VERSION,
        "tool": "ymh",
        "artifact_version": ARTIFACT_VERSION,
        "experiment": cfg.experiment.name(),
        "config": cfg,
        "workers": workers,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "passed": passed,
        "summary": summary,
        "artifacts": art.names,
        "diagnostics": diagnostics,
    });
    art.json("manifest.json", &manifest)?;
    Ok(RunOutcome { passed, summary, artifacts: art.names, out_dir: cfg.out.clone() })
}

type Stage = Result<(bool, Vec<String>, Value)>;

fn geometry(cfg: &RunConfig, art: &mut Artifacts) -> Stage {
    let dom = build_domain(cfg.d, cfg.n)?;
    let cb = coarse_structure(&dom, cfg.block_side)?;
    art.json("descriptor.json", &describe(&dom, Some(&cb)))?;
    let counts = enumerate_connected_sets(cfg.d, cfg.animal_k)?;
    let rows: Vec<Vec<Cell>> = counts
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let k = i as i64 + 1;
            vec![Cell::Int(k), Cell::Int(a as i64), Cell::Float((a as f64).ln() / k as f64)]
        })
        .collect();
    art.write("animals.csv", &csv_string(&["k", "count", "log_count_over_k"], &rows))?;
    let summary = vec![format!(
        "{} vertices, {} edges, {} plaquettes, {} blocks, {} faces",
        dom.vertex_count(),
        dom.edge_count(),
        dom.plaquette_count(),
        cb.block_count(),
        cb.faces().len()
    )];
    Ok((true, summary, Value::Null))
}

fn proca(cfg: &RunConfig, art: &mut Artifacts) -> Stage {
    let params = cfg.model()?;
    let dom = build_domain(cfg.d, cfg.n)?;
    let op = ProcaFamily::free_field(&dom, params.beta, params.m)?.operator(&[])?;
    let ev = op.scaled_spectrum();
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    let ceiling = spectral_ceiling(cfg.d, cfg.m);
    let in_band = lo >= cfg.m - 1e-9 && hi <= ceiling + 1e-9;
    let mut summary = vec![format!("(1/β) spectrum in [{lo:.6}, {hi:.6}], band [{}, {ceiling}]", cfg.m)];
    let mut scan_json = Value::Null;
    let mut decays = true;
    if cfg.d == 2 {
        let scan = covariance_scan(&op, &dom, &standard_decay_pairs(&dom, cfg.kmax)?)?;
        let rows: Vec<Vec<Cell>> = scan
            .rows
            .iter()
            .map(|r| vec![Cell::Int(r.dist), Cell::Float(r.cov), Cell::Float(r.abs_cov), Cell::Float(r.fit_residual)])
            .collect();
        art.write("cov.csv", &csv_string(&["dist", "cov", "abs_cov", "fit_residual"], &rows))?;
        decays = scan.slope < 0.0;
        summary.push(format!("log|cov| slope {:.6}, R² {:.6}", scan.slope, scan.r_squared));
        scan_json = json!({"slope": scan.slope, "intercept": scan.intercept, "r_squared": scan.r_squared});
    }
    art.json(
        "proca.json",
        &json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "spectrum_min": lo,
            "spectrum_max": hi,
            "band_lo": cfg.m,
            "band_hi": ceiling,
            "scan": scan_json,
        }),
    )?;
    Ok((in_band && decays, summary, Value::Null))
}

fn simulate(cfg: &RunConfig, art: &mut Artifacts) -> Stage {
    let settings = cfg.settings();
    settings.validate()?;
    let params = cfg.model()?;
    let dom = build_domain(cfg.d, cfg.n)?;
    let groups = scan_groups(&dom, cfg.kmax, cfg.reach)?;
    let exp = run_grouped_experiment(&dom, &params, &settings, &groups)?;
    let rows: Vec<Vec<Cell>> = exp
        .estimates
        .iter()
        .map(|e| {
            vec![
                Cell::Int(e.x as i64),
                Cell::Int(e.y as i64),
                Cell::Int(e.dist),
                Cell::Float(e.corr),
                Cell::Float(e.stderr),
                Cell::Float(e.ess),
            ]
        })
        .collect();
    art.write("corr.csv", &csv_string(&["pair_x", "pair_y", "dist", "corr", "stderr", "ess"], &rows))?;
    let mut summary = Vec::new();
    let fit = match decay_fit(&exp.estimates) {
        Ok(f) => {
            summary.push(format!("rate {:.6} with 95% CI [{:.6}, {:.6}]", f.rate, f.rate_ci_lo, f.rate_ci_hi));
            json!({
                "schema_version": OUTPUT_SCHEMA_VERSION,
                "rate": f.rate,
                "rate_ci_lo": f.rate_ci_lo,
                "rate_ci_hi": f.rate_ci_hi,
                "rate_stderr": f.rate_stderr,
                "prefactor": f.prefactor,
                "used": f.used,
                "excluded": f.excluded,
            })
        }
        Err(e) => {
            summary.push(format!("no decay fit: {e}"));
            json!({
                "schema_version": OUTPUT_SCHEMA_VERSION,
                "rate": null,
                "rate_ci_lo": null,
                "rate_ci_hi": null,
                "error": e.to_string(),
            })
        }
    };
    art.json("fit.json", &fit)?;
    if !exp.converged {
        summary.push("chains disagree or energy drifted".into());
    }
    let diagnostics = json!({
        "chains": exp.chains,
        "rhat": exp.estimates.iter().map(|e| e.rhat).collect::<Vec<_>>(),
        "converged": exp.converged,
    });
    Ok((exp.converged, summary, diagnostics))
}

fn expand(cfg: &RunConfig, art: &mut Artifacts) -> Stage {
    let (table, lattice) = if cfg.table.is_empty() {
        let t = random_table(cfg.d, cfg.table_side, cfg.table_count, cfg.table_max_size, cfg.table_norm, cfg.r + 2.0, cfg.seed)?;
        (t, CoarseLattice::cube(cfg.d, cfg.table_side)?)
    } else {
        let text = fs::read_to_string(&cfg.table)
            .map_err(|e| config_err(format!("cannot read table {}: {e}", cfg.table)))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("table {}: {e}", cfg.table)))?;
        let t = PolymerWeightTable::from_json(&v)?;
        let dim = t.polymers().next().map_or(cfg.d, |p| p.dim());
        (t, CoarseLattice::unbounded(dim))
    };
    art.json("weights.json", &table.to_json())?;
    let e = truncated_log_z(&table, cfg.n_max, cfg.support_cap, cfg.r)?;
    let kp = kp_condition_check(&table, &lattice);
    let rows: Vec<Vec<Cell>> =
        e.psi_bar.iter().map(|(s, v)| vec![Cell::Text(sites_label(s)), Cell::Float(*v)]).collect();
    art.write("psi_bar.csv", &csv_string(&["support", "psi_bar"], &rows))?;
    art.json("expansion.json", &json!({"schema_version": OUTPUT_SCHEMA_VERSION, "expansion": e, "kp": kp}))?;
    let within = e.envelope.is_none_or(|env| e.psi_bar_norm <= env);
    let summary = vec![
        format!("log Z ≈ {:.12e} from {} clusters", e.total, e.clusters),
        format!("KP margin {:.6} ({})", kp.margin, if kp.holds { "holds" } else { "fails" }),
        format!("‖Ψ̄‖_r = {:.6e}, envelope {:?}", e.psi_bar_norm, e.envelope),
    ];
    Ok((kp.holds && within, summary, Value::Null))
}

fn oracle(cfg: &RunConfig, art: &mut Artifacts) -> Stage {
    let params = cfg.model()?;
    let dom = build_domain(cfg.d, cfg.n)?;
    let cb = coarse_structure(&dom, cfg.block_side)?;
    let plan = IntegrationPlan { method: cfg.method, nodes: cfg.nodes, samples: cfg.samples, seed: cfg.seed };
    let max_face_set = (cfg.max_face_set > 0).then_some(cfg.max_face_set);
    let rep = decomposition_check(&dom, &cb, &params, None, &plan, max_face_set)?;
    art.json("report.json", &rep)?;
    let rows: Vec<Vec<Cell>> = rep
        .weights
        .iter()
        .map(|w| {
            vec![
                Cell::Text(sites_label(&w.sites)),
                Cell::Float(w.weight),
                Cell::Float(w.delta),
                Cell::Float(w.stderr),
                Cell::Int(w.face_sets as i64),
                Cell::Float(w.bad_set),
            ]
        })
        .collect();
    art.write("weights.csv", &csv_string(&["sites", "weight", "delta", "stderr", "face_sets", "bad_set"], &rows))?;
    art.json("weights.json", &rep.weight_table()?.to_json())?;
    let summary = vec![format!(
        "log Z direct {:.12e}, assembled {:.12e}, |difference| {:.3e} vs budget {:.3e}",
        rep.lhs.value, rep.rhs, rep.discrepancy, rep.budget
    )];
    Ok((rep.passed, summary, Value::Null))
}

fn verify(cfg: &RunConfig, art: &mut Artifacts) -> Stage {
    let opts = SuiteOptions {
        seed: cfg.seed,
        stability_samples: cfg.stability_samples,
        sweeps: cfg.sweeps,
        burn_in: cfg.burn_in,
        chains: cfg.chains,
        n_max: cfg.n_max,
    };
    let report = run_suite(&opts, |r| println!("{}", r.line()))?;
    art.json("verify.json", &json!({"schema_version": OUTPUT_SCHEMA_VERSION, "report": report}))?;
    let summary = report.criteria.iter().map(|c| c.line()).collect();
    let timings: Vec<Value> = report.criteria.iter().map(|c| json!({"id": c.id, "seconds": c.seconds})).collect();
    Ok((report.passed(), summary, json!({"timings": timings})))
}
