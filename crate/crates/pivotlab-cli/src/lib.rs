//! Experiment runner behind the `pivotlab` binary.
//!
//! Every subcommand produces a [`RunSummary`] that is written either as CSV
//! (`--format csv`, the default) or as a JSON summary (`--format summary`).
//! Both start from the echoed configuration, so an output file alone is
//! enough to rerun the experiment.
//!
//! CSV layout:
//!
//! ```text
//! # config: {"format":"csv","seed":7,...}
//! n,statistic,value,lo,hi
//! 10,sqz1_over_n,0.93,0.91,0.95
//! ,sigma,0.93,,
//! ```
//!
//! Rows with an empty index column are run-level scalars. Floats use the
//! shortest representation that round-trips (`NaN`, `inf` and `-inf` for
//! non-finite values).
//!
//! Seeds: `--seed`, else the `PIVOTLAB_SEED` environment variable, else
//! [`DEFAULT_SEED`]. Trial `t` of a run draws from stream `t` of the master
//! seed (see [`RngStream::derive`]), so results do not depend on the number
//! of worker threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{Map, Value};

use pivotlab::alignment::{lemma_suite, CoarseAlignment, Lemma};
use pivotlab::estimators::{
    coefficient_gap, eigen_convergence, estimate_sigma, image_convergence, ldp_curve, ldp_summary,
    limit_line, multi_gap, regularity_summary, spectral_ratio, stationary_regularity, EstimatorError, RunSummary,
};
use pivotlab::measures::{MeasureSpec, RngStream};
use pivotlab::pivot::{check_extractions, sample_pivot_index, sample_pivot_law, toy_walk, PivotError};
use pivotlab::schottky::{build_schottky, SchottkyError, SchottkyParams, SchottkySystem};
use pivotlab::stats::wilson_interval;

pub const DEFAULT_SEED: u64 = 1;
pub const SEED_ENV: &str = "PIVOTLAB_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

const Z95: f64 = 1.959963984540054;

#[derive(Parser, Debug)]
#[command(name = "pivotlab", version, about = "Monte Carlo experiments on products of random matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Summary,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Bundled spec name or path to a spec file.
    #[arg(long, default_value = "sl2_hyperbolic")]
    spec: String,
    /// Inline spec text (overrides --spec).
    #[arg(long)]
    spec_text: Option<String>,
    /// Master seed (overrides PIVOTLAB_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args, Debug, Clone)]
struct SchottkyOpts {
    #[arg(long, default_value_t = 0.2)]
    rho: f64,
    #[arg(long = "k-param", default_value_t = 4.0)]
    k_param: f64,
    /// Probes for the final validation.
    #[arg(long, default_value_t = 10_000)]
    probes: usize,
    /// Read a saved system instead of building one.
    #[arg(long)]
    system: Option<PathBuf>,
    /// Replace the system's α (mixture weight of the Schottky part).
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simple random walk on the free product of three copies of Z/2.
    Toy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        /// Largest time reported in the return-probability rows.
        #[arg(long, default_value_t = 30)]
        return_horizon: usize,
    },
    /// Build and validate a Schottky word measure.
    SchottkyBuild {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schottky: SchottkyOpts,
        /// Save the system in its text format.
        #[arg(long)]
        system_out: Option<PathBuf>,
    },
    /// Ping-pong extraction and pivoting, verified run by run.
    Extract {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schottky: SchottkyOpts,
        #[arg(long, default_value_t = 300)]
        letters: usize,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        j_stab: usize,
        /// Partial-product pairs sampled per run.
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Advance/backtrack laws of the pivot algorithm and the pivoting indices.
    PivotVerify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schottky: SchottkyOpts,
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        /// Only steps at level m_j >= this are counted.
        #[arg(long, default_value_t = 10)]
        min_level: usize,
        #[arg(long, default_value_t = 4000)]
        letters: usize,
        /// Draws of each pivoting index (0 skips them).
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long, default_value_t = 60)]
        index_letters: usize,
    },
    /// Escape rate sqz(γ̄_n)/n.
    Sigma {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "50,100,200,500")]
        n_grid: String,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Large deviations of sqz below αn.
    Ldp {
        #[command(flatten)]
        common: Common,
        /// Comma-separated α values; default σ̂/2 from a pilot run.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long, default_value = "10,20,30,40,50,60")]
        n_grid: String,
        #[arg(long, default_value_t = 20_000)]
        trials: usize,
    },
    /// Convergence to the limit line of the top direction, an image and the top eigenline.
    LimitLine {
        #[command(flatten)]
        common: Common,
        /// Comma-separated vector; default (1, 1, …, 1).
        #[arg(long)]
        v: Option<String>,
        #[arg(long, default_value = "5,10,15,20,25,30,35,40")]
        n_grid: String,
        #[arg(long, default_value_t = 150)]
        n_max: usize,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
    },
    /// Tails of the coefficient gap log(‖f‖‖γ̄_n‖‖v‖/|f γ̄_n v|).
    Coeffs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        f: Option<String>,
        #[arg(long)]
        v: Option<String>,
        #[arg(long, default_value = "100,200")]
        n_grid: String,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Tails of log(‖γ̄_n‖/ρ₁(γ̄_n)).
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "100,200")]
        n_grid: String,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Mass of the stationary measure near a subspace.
    Regularity {
        #[command(flatten)]
        common: Common,
        /// Basis vectors, `;`-separated, entries `,`-separated; default e₁.
        #[arg(long)]
        subspace: Option<String>,
        #[arg(long, default_value = "0.02,0.05,0.1,0.2,0.4,0.7,1")]
        r_grid: String,
        #[arg(long, default_value_t = 60)]
        n_max: usize,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
    },
    /// Escape rates of every singular gap.
    MultiGap {
        #[command(flatten)]
        common: Common,
        /// Comma-separated gap indices; default 1..d-1.
        #[arg(long)]
        js: Option<String>,
        #[arg(long, default_value = "50,100,200")]
        n_grid: String,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
    },
    /// Randomized checks of the alignment lemmas.
    LemmaCheck {
        #[command(flatten)]
        common: Common,
        /// Lemma name, or `all`.
        #[arg(long, default_value = "all")]
        lemma: String,
        #[arg(long, default_value_t = 10_000)]
        instances: usize,
        /// Fixed dimension; default cycles through 2, 3, 4.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        max_tries: usize,
    },
}

/// Exit code and captured streams of one invocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<EstimatorError> for Failure {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Invalid(_) => Failure::Validation(e.to_string()),
            EstimatorError::NonProximal { .. } | EstimatorError::AllKernel => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<SchottkyError> for Failure {
    fn from(e: SchottkyError) -> Self {
        match e {
            SchottkyError::NotProximal { .. }
            | SchottkyError::TooFewDirections { .. }
            | SchottkyError::Exhausted { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<PivotError> for Failure {
    fn from(e: PivotError) -> Self {
        Failure::Numerical(e.to_string())
    }
}

type Res<T> = Result<T, Failure>;

/// A finished run: its summary plus whether its built-in check passed.
struct Report {
    summary: RunSummary,
    passed: bool,
    note: Option<String>,
}

impl Report {
    fn ok(summary: RunSummary) -> Self {
        Report { summary, passed: true, note: None }
    }
}

/// Runs the CLI on `args` (including the program name). `env_seed` is the
/// value of `PIVOTLAB_SEED`, if set.
pub fn run<I, T>(args: I, env_seed: Option<&str>) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    Outcome { code: EXIT_OK, stdout: text, stderr: String::new() }
                }
                _ => Outcome { code: EXIT_USAGE, stdout: String::new(), stderr: text },
            };
        }
    };
    match execute(cli.command, env_seed) {
        Ok((text, path, report)) => {
            let mut stderr = String::new();
            if let Some(n) = &report.note {
                let _ = writeln!(stderr, "{n}");
            }
            let stdout = match path {
                Some(p) => {
                    if let Err(e) = std::fs::write(&p, &text) {
                        return Outcome {
                            code: EXIT_VALIDATION,
                            stdout: String::new(),
                            stderr: format!("error: cannot write {}: {e}\n", p.display()),
                        };
                    }
                    String::new()
                }
                None => text,
            };
            let code = if report.passed { EXIT_OK } else { EXIT_VALIDATION };
            if !report.passed {
                let _ = writeln!(stderr, "check failed");
            }
            Outcome { code, stdout, stderr }
        }
        Err(f) => Outcome { code: f.code(), stdout: String::new(), stderr: format!("error: {}\n", f.message()) },
    }
}

fn resolve_seed(flag: Option<u64>, env_seed: Option<&str>) -> Res<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env_seed {
        Some(s) => s
            .trim()
            .parse()
            .map_err(|_| Failure::Validation(format!("{SEED_ENV} must be an unsigned integer, got '{s}'"))),
        None => Ok(DEFAULT_SEED),
    }
}

fn load_spec(common: &Common) -> Res<(MeasureSpec, String)> {
    if let Some(text) = &common.spec_text {
        let nu = MeasureSpec::parse(text).map_err(|e| Failure::Validation(format!("inline spec: {e}")))?;
        return Ok((nu, "inline".into()));
    }
    if let Some(nu) = MeasureSpec::bundled(&common.spec) {
        return Ok((nu, common.spec.clone()));
    }
    let text = std::fs::read_to_string(&common.spec).map_err(|e| {
        Failure::Validation(format!(
            "spec '{}' is neither bundled ({}) nor a readable file: {e}",
            common.spec,
            MeasureSpec::BUNDLED.join(", ")
        ))
    })?;
    let nu = MeasureSpec::parse(&text).map_err(|e| Failure::Validation(format!("{}: {e}", common.spec)))?;
    Ok((nu, common.spec.clone()))
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Res<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| Failure::Validation(format!("{what}: cannot parse '{x}'"))))
        .collect()
}

fn parse_vector(what: &str, s: &str, d: usize) -> Res<DVector<f64>> {
    let v: Vec<f64> = parse_list(what, s)?;
    if v.len() != d || v.iter().any(|x| !x.is_finite()) {
        return Err(Failure::Validation(format!("{what} must have {d} finite entries")));
    }
    Ok(DVector::from_vec(v))
}

fn check_positive(what: &str, x: usize) -> Res<()> {
    if x == 0 {
        return Err(Failure::Validation(format!("{what} must be positive")));
    }
    Ok(())
}

struct Config {
    map: Map<String, Value>,
}

impl Config {
    fn new(subcommand: &str, common: &Common, seed: u64) -> Self {
        let mut map = Map::new();
        map.insert("subcommand".into(), subcommand.into());
        map.insert("seed".into(), seed.into());
        map.insert("format".into(), serde_json::to_value(common.format).expect("plain enum"));
        if let Some(p) = &common.output {
            map.insert("output".into(), p.display().to_string().into());
        }
        Config { map }
    }

    fn set<V: Serialize>(&mut self, key: &str, v: V) {
        self.map.insert(key.into(), json_value(&v));
    }
}

fn json_value<V: Serialize>(v: &V) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn float_value(x: f64) -> Value {
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or_else(|| Value::String(fmt_float(x)))
}

fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

fn parse_float(s: &str) -> Option<f64> {
    match s {
        "" => None,
        "NaN" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

fn render(cfg: &Config, summary: &RunSummary, format: Format) -> String {
    let config = serde_json::to_string(&cfg.map).expect("config is valid JSON");
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
            w.write_record([summary.index_name.as_str(), "statistic", "value", "lo", "hi"]).expect("in-memory");
            for r in &summary.rows {
                w.write_record([fmt_float(r.index), r.statistic.clone(), fmt_float(r.value), fmt_float(r.lo), fmt_float(r.hi)])
                    .expect("in-memory");
            }
            for (name, v) in &summary.scalars {
                w.write_record(["", name.as_str(), &fmt_float(*v), "", ""]).expect("in-memory");
            }
            let body = String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8");
            format!("# config: {config}\n{body}")
        }
        Format::Summary => {
            let mut root = Map::new();
            root.insert("config".into(), Value::Object(cfg.map.clone()));
            root.insert("index_name".into(), summary.index_name.clone().into());
            let rows = summary
                .rows
                .iter()
                .map(|r| {
                    let mut m = Map::new();
                    m.insert("index".into(), float_value(r.index));
                    m.insert("statistic".into(), r.statistic.clone().into());
                    m.insert("value".into(), float_value(r.value));
                    m.insert("lo".into(), float_value(r.lo));
                    m.insert("hi".into(), float_value(r.hi));
                    Value::Object(m)
                })
                .collect();
            root.insert("rows".into(), Value::Array(rows));
            let scalars: Map<String, Value> =
                summary.scalars.iter().map(|(k, v)| (k.clone(), float_value(*v))).collect();
            root.insert("scalars".into(), Value::Object(scalars));
            let mut s = serde_json::to_string_pretty(&Value::Object(root)).expect("valid JSON");
            s.push('\n');
            s
        }
    }
}

/// One data row of a CSV output; `None` marks an empty cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub index: Option<f64>,
    pub statistic: String,
    pub value: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

/// A parsed output file of either format.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedOutput {
    pub config: Value,
    pub index_name: String,
    /// Per-index rows (scalars excluded).
    pub rows: Vec<CsvRow>,
    pub scalars: BTreeMap<String, f64>,
}

impl ParsedOutput {
    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }

    pub fn rows_named<'a>(&'a self, statistic: &'a str) -> impl Iterator<Item = &'a CsvRow> + 'a {
        self.rows.iter().filter(move |r| r.statistic == statistic)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError(pub String);

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ParseError {}

/// Parses the CSV format.
pub fn parse_csv_output(text: &str) -> Result<ParsedOutput, ParseError> {
    let (first, rest) = text.split_once('\n').ok_or_else(|| ParseError("empty output".into()))?;
    let config_text =
        first.strip_prefix("# config: ").ok_or_else(|| ParseError("missing '# config:' line".into()))?;
    let config: Value = serde_json::from_str(config_text).map_err(|e| ParseError(format!("config: {e}")))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
    let headers = reader.headers().map_err(|e| ParseError(e.to_string()))?.clone();
    if headers.len() != 5 || &headers[1] != "statistic" || &headers[2] != "value" || &headers[3] != "lo" || &headers[4] != "hi"
    {
        return Err(ParseError(format!("unexpected header {headers:?}")));
    }
    let mut out =
        ParsedOutput { config, index_name: headers[0].to_string(), rows: Vec::new(), scalars: BTreeMap::new() };
    for rec in reader.records() {
        let rec = rec.map_err(|e| ParseError(e.to_string()))?;
        let cell = |i: usize| -> Result<Option<f64>, ParseError> {
            let s = &rec[i];
            if s.is_empty() {
                return Ok(None);
            }
            parse_float(s).map(Some).ok_or_else(|| ParseError(format!("bad number '{s}'")))
        };
        let row = CsvRow { index: cell(0)?, statistic: rec[1].to_string(), value: cell(2)?, lo: cell(3)?, hi: cell(4)? };
        match row.index {
            None => {
                out.scalars.insert(row.statistic, row.value.unwrap_or(f64::NAN));
            }
            Some(_) => out.rows.push(row),
        }
    }
    Ok(out)
}

/// Parses the JSON summary format.
pub fn parse_summary_output(text: &str) -> Result<ParsedOutput, ParseError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ParseError(e.to_string()))?;
    let num = |x: &Value| -> Result<f64, ParseError> {
        match x {
            Value::Number(n) => n.as_f64().ok_or_else(|| ParseError("bad number".into())),
            Value::String(s) => parse_float(s).ok_or_else(|| ParseError(format!("bad number '{s}'"))),
            _ => Err(ParseError(format!("expected a number, got {x}"))),
        }
    };
    let index_name = v["index_name"].as_str().ok_or_else(|| ParseError("missing index_name".into()))?.to_string();
    let mut rows = Vec::new();
    for r in v["rows"].as_array().ok_or_else(|| ParseError("missing rows".into()))? {
        rows.push(CsvRow {
            index: Some(num(&r["index"])?),
            statistic: r["statistic"].as_str().unwrap_or_default().to_string(),
            value: Some(num(&r["value"])?),
            lo: Some(num(&r["lo"])?),
            hi: Some(num(&r["hi"])?),
        });
    }
    let mut scalars = BTreeMap::new();
    for (k, x) in v["scalars"].as_object().ok_or_else(|| ParseError("missing scalars".into()))? {
        scalars.insert(k.clone(), num(x)?);
    }
    Ok(ParsedOutput { config: v["config"].clone(), index_name, rows, scalars })
}

/// Parses either format, telling them apart by the first character.
pub fn parse_output(text: &str) -> Result<ParsedOutput, ParseError> {
    if text.starts_with('#') {
        parse_csv_output(text)
    } else {
        parse_summary_output(text)
    }
}

fn load_system(
    opts: &SchottkyOpts,
    common: &Common,
    cfg: &mut Config,
    rng: &RngStream,
) -> Res<SchottkySystem> {
    let sys = match &opts.system {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
            cfg.set("system", path.display().to_string());
            SchottkySystem::parse(&text)?
        }
        None => {
            let (nu, name) = load_spec(common)?;
            cfg.set("spec", name);
            cfg.set("rho", opts.rho);
            cfg.set("k_param", opts.k_param);
            let params = SchottkyParams { rho: opts.rho, k_param: opts.k_param, probes: opts.probes, ..Default::default() };
            build_schottky(&nu, &params, rng)?.0
        }
    };
    match opts.alpha {
        Some(a) => {
            cfg.set("alpha", a);
            Ok(sys.with_alpha(a)?)
        }
        None => Ok(sys),
    }
}

fn execute(cmd: Command, env_seed: Option<&str>) -> Res<(String, Option<PathBuf>, Report)> {
    let common = match &cmd {
        Command::Toy { common, .. }
        | Command::SchottkyBuild { common, .. }
        | Command::Extract { common, .. }
        | Command::PivotVerify { common, .. }
        | Command::Sigma { common, .. }
        | Command::Ldp { common, .. }
        | Command::LimitLine { common, .. }
        | Command::Coeffs { common, .. }
        | Command::Spectrum { common, .. }
        | Command::Regularity { common, .. }
        | Command::MultiGap { common, .. }
        | Command::LemmaCheck { common, .. } => common.clone(),
    };
    let seed = resolve_seed(common.seed, env_seed)?;
    let rng = RngStream::new(seed, 0);
    let (cfg, report) = match cmd {
        Command::Toy { n, trials, return_horizon, .. } => toy(&common, seed, n, trials, return_horizon)?,
        Command::SchottkyBuild { schottky, system_out, .. } => {
            let mut cfg = Config::new("schottky-build", &common, seed);
            cfg.set("probes", schottky.probes);
            let (nu, name) = load_spec(&common)?;
            cfg.set("spec", name);
            cfg.set("rho", schottky.rho);
            cfg.set("k_param", schottky.k_param);
            let params = SchottkyParams {
                rho: schottky.rho,
                k_param: schottky.k_param,
                probes: schottky.probes,
                ..Default::default()
            };
            let (sys, rep) = build_schottky(&nu, &params, &rng)?;
            if let Some(p) = &system_out {
                cfg.set("system_out", p.display().to_string());
                std::fs::write(p, sys.to_text())
                    .map_err(|e| Failure::Validation(format!("cannot write {}: {e}", p.display())))?;
            }
            let mut s = RunSummary::new("word");
            for (i, w) in sys.words().iter().enumerate() {
                s.row(i as f64, "weight", w.weight, f64::NAN, f64::NAN);
            }
            s.scalar("m", rep.m as f64);
            s.scalar("eps_exponent", rep.eps_exponent as f64);
            s.scalar("support", rep.support as f64);
            s.scalar("words", sys.words().len() as f64);
            s.scalar("probes", rep.validation.probes as f64);
            s.scalar("adversarial_probes", rep.validation.adversarial as f64);
            s.scalar("min_left_mass", rep.validation.min_left);
            s.scalar("min_right_mass", rep.validation.min_right);
            s.scalar("worst_margin", rep.validation.worst_margin);
            s.scalar("minorization_exact", sys.minorization_holds() as u8 as f64);
            let passed = rep.validation.passed && rep.validation.worst_margin >= 0.0 && sys.minorization_holds();
            s.scalar("passed", passed as u8 as f64);
            (cfg, Report { summary: s, passed, note: None })
        }
        Command::Extract { schottky, letters, runs, j_stab, samples, .. } => {
            let mut cfg = Config::new("extract", &common, seed);
            check_positive("--runs", runs)?;
            check_positive("--letters", letters)?;
            cfg.set("letters", letters);
            cfg.set("runs", runs);
            cfg.set("j_stab", j_stab);
            cfg.set("samples", samples);
            let sys = load_system(&schottky, &common, &mut cfg, &rng.derive(0))?;
            let rel = CoarseAlignment { eps: sys.eps() };
            let ex = check_extractions(&sys, &rel, runs, letters, j_stab, samples, &rng.derive(1))?;
            let law = ex.stats.report(&sys);
            let mut s = RunSummary::new("run_set");
            s.scalar("runs", ex.runs as f64);
            s.scalar("failed_runs", ex.failed_runs as f64);
            s.scalar("pairs_checked", ex.pairs_checked as f64);
            s.scalar("alignment_violations", ex.alignment_violations as f64);
            s.scalar("worst_margin", ex.worst_margin);
            s.scalar("strong_hypothesis_runs", ex.strong_hypothesis_runs as f64);
            s.scalar("odd_blocks", law.odd_blocks as f64);
            s.scalar("density_violations", law.density_violations as f64);
            s.scalar("max_density_ratio", law.max_density_ratio);
            s.scalar("block_length_beta", law.beta);
            s.scalar("block_length_beta_se", law.beta_se);
            let passed = ex.failed_runs == 0 && law.beta > 0.0;
            s.scalar("passed", passed as u8 as f64);
            (cfg, Report { summary: s, passed, note: None })
        }
        Command::PivotVerify { schottky, steps, min_level, letters, draws, index_letters, .. } => {
            let mut cfg = Config::new("pivot-verify", &common, seed);
            check_positive("--steps", steps)?;
            check_positive("--letters", letters)?;
            cfg.set("steps", steps);
            cfg.set("min_level", min_level);
            cfg.set("letters", letters);
            cfg.set("draws", draws);
            cfg.set("index_letters", index_letters);
            let sys = load_system(&schottky, &common, &mut cfg, &rng.derive(0))?;
            pivot_verify(cfg, &sys, steps, min_level, letters, draws, index_letters, &rng)?
        }
        Command::Sigma { n_grid, trials, .. } => {
            let mut cfg = Config::new("sigma", &common, seed);
            let (nu, name) = load_spec(&common)?;
            let grid: Vec<usize> = parse_list("--n-grid", &n_grid)?;
            cfg.set("spec", name);
            cfg.set("n_grid", &grid);
            cfg.set("trials", trials);
            let est = estimate_sigma(&nu, &grid, trials, &rng)?;
            let mut s = est.summary();
            s.scalar("sigma_se", est.se);
            (cfg, Report::ok(s))
        }
        Command::Ldp { alphas, n_grid, trials, .. } => {
            let mut cfg = Config::new("ldp", &common, seed);
            let (nu, name) = load_spec(&common)?;
            let grid: Vec<usize> = parse_list("--n-grid", &n_grid)?;
            cfg.set("spec", name);
            cfg.set("n_grid", &grid);
            cfg.set("trials", trials);
            let alphas = match alphas {
                Some(a) => parse_list("--alphas", &a)?,
                None => {
                    let pilot_n = grid.last().copied().unwrap_or(1).max(100);
                    let est = estimate_sigma(&nu, &[pilot_n], trials.min(5000).max(1), &rng.derive(1))?;
                    vec![est.sigma / 2.0]
                }
            };
            cfg.set("alphas", &alphas);
            let fits = ldp_curve(&nu, &alphas, &grid, trials, &rng.derive(2))?;
            (cfg, Report::ok(ldp_summary(&fits)))
        }
        Command::LimitLine { v, n_grid, n_max, trials, .. } => {
            let mut cfg = Config::new("limit-line", &common, seed);
            let (nu, name) = load_spec(&common)?;
            let d = nu.dim();
            let grid: Vec<usize> = parse_list("--n-grid", &n_grid)?;
            let v = match v {
                Some(s) => parse_vector("--v", &s, d)?,
                None => DVector::from_element(d, 1.0),
            };
            cfg.set("spec", name);
            cfg.set("n_grid", &grid);
            cfg.set("n_max", n_max);
            cfg.set("trials", trials);
            cfg.set("v", v.as_slice());
            let ll = limit_line(&nu, trials, &grid, n_max, &rng.derive(0))?;
            let img = image_convergence(&nu, &v, trials, &grid, n_max, &rng.derive(1))?;
            let eig = eigen_convergence(&nu, trials, &grid, n_max, &rng.derive(2))?;
            let mut s = RunSummary::new("n");
            for (curve, name) in [(&ll.curve, "top_direction"), (&img, "image"), (&eig.curve, "eigenline")] {
                let sub = curve.summary(&format!("{name}_distance"));
                s.rows.extend(sub.rows);
                s.scalar(&format!("{name}_rate"), curve.rate);
                s.scalar(&format!("{name}_rate_se"), curve.rate_se);
            }
            for (p, f) in eig.curve.points.iter().zip(&eig.prox_fraction) {
                let hits = (f * trials as f64).round() as usize;
                let (lo, hi) = wilson_interval(hits, trials, Z95);
                s.row(p.n as f64, "prox_positive_fraction", *f, lo, hi);
            }
            s.scalar("n_max", n_max as f64);
            (cfg, Report::ok(s))
        }
        Command::Coeffs { f, v, n_grid, trials, .. } => {
            let mut cfg = Config::new("coeffs", &common, seed);
            let (nu, name) = load_spec(&common)?;
            let d = nu.dim();
            let grid: Vec<usize> = parse_list("--n-grid", &n_grid)?;
            let f = match f {
                Some(s) => parse_vector("--f", &s, d)?,
                None => DVector::from_fn(d, |i, _| (i as f64 + 1.0).cos()),
            };
            let v = match v {
                Some(s) => parse_vector("--v", &s, d)?,
                None => DVector::from_fn(d, |i, _| (i as f64 + 2.0).sin()),
            };
            cfg.set("spec", name);
            cfg.set("n_grid", &grid);
            cfg.set("trials", trials);
            cfg.set("f", f.as_slice());
            cfg.set("v", v.as_slice());
            let tails = coefficient_gap(&nu, &f, &v, &grid, trials, &rng)?;
            let mut s = tails.summary("coefficient_gap");
            tail_drift(&mut s, &tails.quantiles(0.99));
            (cfg, Report::ok(s))
        }
        Command::Spectrum { n_grid, trials, .. } => {
            let mut cfg = Config::new("spectrum", &common, seed);
            let (nu, name) = load_spec(&common)?;
            let grid: Vec<usize> = parse_list("--n-grid", &n_grid)?;
            cfg.set("spec", name);
            cfg.set("n_grid", &grid);
            cfg.set("trials", trials);
            let tails = spectral_ratio(&nu, &grid, trials, &rng)?;
            let mut s = tails.summary("spectral_ratio");
            tail_drift(&mut s, &tails.quantiles(0.99));
            (cfg, Report::ok(s))
        }
        Command::Regularity { subspace, r_grid, n_max, trials, .. } => {
            let mut cfg = Config::new("regularity", &common, seed);
            let (nu, name) = load_spec(&common)?;
            let d = nu.dim();
            let basis: Vec<DVector<f64>> = match subspace {
                Some(s) => s.split(';').map(|b| parse_vector("--subspace", b, d)).collect::<Res<_>>()?,
                None => vec![DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 })],
            };
            let radii: Vec<f64> = parse_list("--r-grid", &r_grid)?;
            if radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return Err(Failure::Validation("--r-grid entries must be non-negative".into()));
            }
            cfg.set("spec", name);
            cfg.set("subspace", basis.iter().map(|b| b.as_slice().to_vec()).collect::<Vec<_>>());
            cfg.set("r_grid", &radii);
            cfg.set("n_max", n_max);
            cfg.set("trials", trials);
            let points = stationary_regularity(&nu, &basis, &radii, trials, n_max, &rng)?;
            (cfg, Report::ok(regularity_summary(&points)))
        }
        Command::MultiGap { js, n_grid, trials, .. } => {
            let mut cfg = Config::new("multi-gap", &common, seed);
            let (nu, name) = load_spec(&common)?;
            let grid: Vec<usize> = parse_list("--n-grid", &n_grid)?;
            let js: Vec<usize> = match js {
                Some(s) => parse_list("--js", &s)?,
                None => (1..nu.dim()).collect(),
            };
            cfg.set("spec", name);
            cfg.set("n_grid", &grid);
            cfg.set("trials", trials);
            cfg.set("js", &js);
            let mg = multi_gap(&nu, &js, &grid, trials, &rng)?;
            (cfg, Report::ok(mg.summary()))
        }
        Command::LemmaCheck { lemma, instances, dim, max_tries, .. } => {
            let mut cfg = Config::new("lemma-check", &common, seed);
            check_positive("--instances", instances)?;
            check_positive("--max-tries", max_tries)?;
            if dim.is_some_and(|d| d < 2) {
                return Err(Failure::Validation("--dim must be at least 2".into()));
            }
            let lemmas: Vec<Lemma> = if lemma == "all" {
                Lemma::ALL.to_vec()
            } else {
                vec![lemma.parse().map_err(Failure::Validation)?]
            };
            cfg.set("lemma", &lemma);
            cfg.set("instances", instances);
            cfg.set("dim", dim);
            cfg.set("max_tries", max_tries);
            let mut s = RunSummary::new("lemma");
            let mut total = 0;
            let mut short = 0;
            for (i, &l) in lemmas.iter().enumerate() {
                let idx = Lemma::ALL.iter().position(|&x| x == l).expect("listed");
                let rep = lemma_suite(l, instances, dim, max_tries, &rng.derive(idx as u64));
                let (lo, hi) = wilson_interval(rep.violations, rep.applicable.max(1), Z95);
                s.row(i as f64, &format!("{}_violations", l.name()), rep.violations as f64, lo, hi);
                s.row(i as f64, &format!("{}_worst_margin", l.name()), rep.worst_margin, f64::NAN, f64::NAN);
                s.row(i as f64, &format!("{}_applicable", l.name()), rep.applicable as f64, f64::NAN, f64::NAN);
                s.row(i as f64, &format!("{}_candidates", l.name()), rep.candidates as f64, f64::NAN, f64::NAN);
                total += rep.violations;
                short += instances - rep.applicable;
            }
            s.scalar("violations", total as f64);
            s.scalar("instances_not_found", short as f64);
            let passed = total == 0;
            let note = (short > 0).then(|| format!("{short} instances found no applicable candidate"));
            (cfg, Report { summary: s, passed, note })
        }
    };
    let text = render(&cfg, &report.summary, common.format);
    Ok((text, common.output.clone(), report))
}

/// Adds the relative drift of a quantile between the first and last grid points.
fn tail_drift(s: &mut RunSummary, q: &[f64]) {
    if let (Some(a), Some(b)) = (q.first(), q.last()) {
        s.scalar("q99_first", *a);
        s.scalar("q99_last", *b);
        s.scalar("q99_relative_drift", (b - a).abs() / a.abs());
    }
}

fn toy(common: &Common, seed: u64, n: usize, trials: usize, horizon: usize) -> Res<(Config, Report)> {
    check_positive("--n", n)?;
    check_positive("--trials", trials)?;
    let mut cfg = Config::new("toy", common, seed);
    cfg.set("n", n);
    cfg.set("trials", trials);
    cfg.set("return_horizon", horizon);
    let stats = toy_walk(n, trials, &RngStream::new(seed, 0));
    let mut s = RunSummary::new("t");
    for t in 1..=horizon.min(n) {
        let hits = stats.return_counts[t];
        let (lo, hi) = wilson_interval(hits, trials, Z95);
        s.row(t as f64, "return_probability", hits as f64 / trials as f64, lo, hi);
        s.row(t as f64, "return_bound", (8.0f64 / 9.0).powf(t as f64 / 2.0), f64::NAN, f64::NAN);
    }
    s.scalar("mean_speed", stats.mean_speed);
    s.scalar("mean_speed_lo", stats.mean_speed - Z95 * stats.speed_se);
    s.scalar("mean_speed_hi", stats.mean_speed + Z95 * stats.speed_se);
    s.scalar("mean_pivot_gap", stats.mean_pivot_gap);
    Ok((cfg, Report::ok(s)))
}

#[allow(clippy::too_many_arguments)]
fn pivot_verify(
    cfg: Config,
    sys: &SchottkySystem,
    steps: usize,
    min_level: usize,
    letters: usize,
    draws: usize,
    index_letters: usize,
    rng: &RngStream,
) -> Res<(Config, Report)> {
    let rho = sys.rho();
    let rel = CoarseAlignment { eps: sys.eps() };
    let law = sample_pivot_law(sys, &rel, steps, min_level, letters, &rng.derive(1))?;
    let mut s = RunSummary::new("k");
    let backtracks: usize = law.depth_counts.iter().sum();
    let q = rho / (1.0 - 2.0 * rho);
    for (k, &c) in law.depth_counts.iter().enumerate().skip(1) {
        let (lo, hi) = wilson_interval(c, backtracks.max(1), Z95);
        s.row(k as f64, "backtrack_depth", c as f64 / backtracks.max(1) as f64, lo, hi);
        s.row(k as f64, "backtrack_depth_expected", (1.0 - q) * q.powi(k as i32 - 1), f64::NAN, f64::NAN);
    }
    let adv = law.advance_rate();
    let adv_se = (adv * (1.0 - adv) / law.steps as f64).sqrt();
    let depth = law.depth_fit(rho);
    s.scalar("steps", law.steps as f64);
    s.scalar("advance_rate", adv);
    s.scalar("advance_rate_se", adv_se);
    s.scalar("advance_expected", 1.0 - 2.0 * rho);
    s.scalar("depth_chi2", depth.statistic);
    s.scalar("depth_p_value", depth.p_value);
    s.scalar("penalty_clamps", law.clamps as f64);
    s.scalar("runs", law.runs as f64);
    s.scalar("flagged_runs", law.flagged as f64);
    let mut passed = (adv - (1.0 - 2.0 * rho)).abs() <= (3.0 * adv_se).max(0.01) && depth.p_value > 0.01;
    if draws > 0 {
        for (cyclic, name, q) in [(false, "r", rho), (true, "c", 2.0 * rho)] {
            let idx = sample_pivot_index(sys, &rel, draws, index_letters, cyclic, &rng.derive(2 + cyclic as u64));
            for j in 1..=6 {
                let t = (idx.tail(j) * draws as f64).round() as usize;
                let (lo, hi) = wilson_interval(t, draws, Z95);
                s.row(j as f64, &format!("{name}_tail"), idx.tail(j), lo, hi);
                s.row(j as f64, &format!("{name}_tail_expected"), q.powi(j as i32), f64::NAN, f64::NAN);
            }
            let fit = idx.fit(q);
            s.scalar(&format!("{name}_chi2"), fit.statistic);
            s.scalar(&format!("{name}_p_value"), fit.p_value);
            s.scalar(&format!("{name}_wraps"), idx.wraps as f64);
            passed &= fit.p_value > 0.01;
        }
    }
    s.scalar("passed", passed as u8 as f64);
    Ok((cfg, Report { summary: s, passed, note: None }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for x in [0.1, -3.5e-12, 1e300, f64::INFINITY, f64::NEG_INFINITY, 0.0] {
            assert_eq!(parse_float(&fmt_float(x)), Some(x));
        }
        assert!(parse_float("NaN").unwrap().is_nan());
        assert_eq!(parse_float(""), None);
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(5), Some("9")).unwrap(), 5);
        assert_eq!(resolve_seed(None, Some("9")).unwrap(), 9);
        assert_eq!(resolve_seed(None, None).unwrap(), DEFAULT_SEED);
        assert!(resolve_seed(None, Some("x")).is_err());
    }

    #[test]
    fn non_finite_floats_stay_valid_json() {
        assert_eq!(float_value(f64::NAN), Value::String("NaN".into()));
        assert_eq!(float_value(1.5), serde_json::json!(1.5));
    }
}
