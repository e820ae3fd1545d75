//! Command-line front end: layered configuration (defaults, TOML file, CLI
//! flags), quote ingestion, and artifact emission.
//!
//! Every run derives a 64-bit FNV-1a hash of its effective configuration;
//! output tables are written as `<command>_<hash16>.csv` next to a
//! `<command>_<hash16>_manifest.txt`, and every file starts with a
//! provenance header (tool version, command, config hash, seed). Outputs
//! contain no timestamps, so a rerun with an identical configuration
//! reproduces every artifact byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::black::{black_vega, implied_vol, mc_price, OptionKind};
use crate::error::{Error, Result};
use crate::fourier::{rough_heston_smile, QuadConfig};
use crate::kernel::{build_lift, kernel_approx_error, scales_for_gamma_range, LiftSpec};
use crate::math::{logspace, mean_stderr};
use crate::params::ModelParams;
use crate::sim::{simulate_hmlv, simulate_lift, uniform_grid, PathBatch, SimConfig};
use crate::skew::{skew_ratio_study, SkewStudyConfig};
use crate::surface::{calibrate_local_vol, CalibConfig, LocalVolSurface, QuoteLattice};

const ENV_OUT_DIR: &str = "HMLV_OUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "hmlv",
    version,
    about = "Rough-volatility pricing, local-vol calibration, and skew studies"
)]
struct Cli {
    /// TOML configuration file; command-line flags override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (default: $HMLV_OUT_DIR, then the working directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    lift: LiftArgs,
    #[command(subcommand)]
    command: CommandArgs,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Initial variance v0.
    #[arg(long, global = true)]
    v0: Option<f64>,
    /// Long-run variance level.
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Mean-reversion speed.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Vol-of-vol.
    #[arg(long, global = true)]
    nu: Option<f64>,
    /// Spot-variance correlation.
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// Hurst parameter in (0, 1/2].
    #[arg(long, global = true)]
    hurst: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct LiftArgs {
    /// Number of lift factors.
    #[arg(long = "n-factors", global = true)]
    n_factors: Option<usize>,
    /// Slowest lift mean-reversion rate.
    #[arg(long = "gamma-first", global = true)]
    gamma_first: Option<f64>,
    /// Fastest lift mean-reversion rate.
    #[arg(long = "gamma-last", global = true)]
    gamma_last: Option<f64>,
    /// Load lift nodes from a file instead of building them.
    #[arg(long = "lift-file", global = true, value_name = "FILE")]
    lift_file: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum CommandArgs {
    /// Build the Markovian lift and write its nodes with approximation
    /// error diagnostics.
    Lift,
    /// Simulate the lifted model and emit per-time summary statistics.
    Simulate(SimArgs),
    /// Price European calls by Fourier quadrature or Monte Carlo.
    Price(PriceArgs),
    /// Calibrate the nodal local-volatility surface to a quote file.
    CalibrateLv(CalibArgs),
    /// Run the particle leverage simulation under a calibrated surface.
    CalibrateLeverage(LeverageArgs),
    /// Estimate the implied/local skew power laws and their ratio.
    SkewStudy(SkewArgs),
}

#[derive(Args, Debug, Default)]
struct SimArgs {
    #[arg(long = "n-paths")]
    n_paths: Option<usize>,
    /// Number of uniform time steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Simulation horizon in years.
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Antithetic variance reduction (pass false to disable).
    #[arg(long)]
    antithetic: Option<bool>,
    /// Also dump the full spot and variance path matrices.
    #[arg(long = "dump-paths")]
    dump_paths: bool,
}

#[derive(Args, Debug, Default)]
struct PriceArgs {
    /// Pricing method: fourier or mc.
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated maturities in years.
    #[arg(long)]
    maturities: Option<String>,
    /// Comma-separated strikes (forward = 1).
    #[arg(long)]
    strikes: Option<String>,
    #[arg(long = "n-paths")]
    n_paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct CalibArgs {
    /// Quote file with header maturity,strike,implied_vol.
    #[arg(long, value_name = "FILE")]
    quotes: Option<PathBuf>,
    /// Short-time cutoff below which the surface extrapolates flat.
    #[arg(long)]
    delta: Option<f64>,
    /// Convergence tolerance on nodal implied vols.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long = "max-iterations")]
    max_iterations: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct LeverageArgs {
    /// Local-vol surface file (output of calibrate-lv).
    #[arg(long, value_name = "FILE")]
    surface: Option<PathBuf>,
    /// Optional quote file to reprice against.
    #[arg(long, value_name = "FILE")]
    quotes: Option<PathBuf>,
    #[arg(long = "n-paths")]
    n_paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Conditional-expectation bin count (default: from particle count).
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct SkewArgs {
    #[arg(long = "t-min")]
    t_min: Option<f64>,
    #[arg(long = "t-max")]
    t_max: Option<f64>,
    #[arg(long = "points-per-decade")]
    points_per_decade: Option<usize>,
    /// Finite-difference offset in zeta units.
    #[arg(long = "zeta-eps")]
    zeta_eps: Option<f64>,
    #[arg(long = "n-paths")]
    n_paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Largest maturity priced by quadrature rather than Monte Carlo.
    #[arg(long = "fourier-max-t")]
    fourier_max_t: Option<f64>,
    /// Slope tolerance of the critical-time scan.
    #[arg(long = "slope-tol")]
    slope_tol: Option<f64>,
}

/// Fully merged effective configuration for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: String,
    pub model: ModelParams,
    pub lift_n: usize,
    pub gamma_first: f64,
    pub gamma_last: f64,
    pub lift_file: Option<PathBuf>,
    pub quad: QuadConfig,
    pub sim: SimSection,
    pub price: PriceSection,
    pub calib: CalibSection,
    pub leverage: LeverageSection,
    pub skew: SkewSection,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SimSection {
    pub n_paths: usize,
    pub steps: usize,
    pub t_end: f64,
    pub seed: u64,
    pub antithetic: bool,
    pub dump_paths: bool,
}

#[derive(Debug, Clone)]
pub struct PriceSection {
    pub method: PriceMethod,
    pub maturities: Vec<f64>,
    pub strikes: Vec<f64>,
    pub n_paths: usize,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceMethod {
    Fourier,
    MonteCarlo,
}

#[derive(Debug, Clone)]
pub struct CalibSection {
    pub quotes: Option<PathBuf>,
    pub delta: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub fixed_k_extrapolation: bool,
}

#[derive(Debug, Clone)]
pub struct LeverageSection {
    pub surface: Option<PathBuf>,
    pub quotes: Option<PathBuf>,
    pub n_paths: usize,
    pub steps: usize,
    pub t_end: Option<f64>,
    pub seed: u64,
    pub bins: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SkewSection {
    pub t_min: f64,
    pub t_max: f64,
    pub points_per_decade: usize,
    pub zeta_eps: f64,
    pub zeta_sensitivity: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub fourier_max_t: f64,
    pub slope_tol: f64,
    pub sim_refine: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            model: ModelParams { v0: 0.02, theta: 0.02, lambda: 0.3, nu: 0.3, rho: -0.7, h: 0.1 },
            lift_n: 20,
            gamma_first: 1.76e-4,
            gamma_last: 6.42e3,
            lift_file: None,
            quad: QuadConfig::default(),
            sim: SimSection {
                n_paths: 10_000,
                steps: 200,
                t_end: 1.0,
                seed: 42,
                antithetic: true,
                dump_paths: false,
            },
            price: PriceSection {
                method: PriceMethod::Fourier,
                maturities: vec![0.25, 1.0],
                strikes: vec![0.8, 0.9, 1.0, 1.1, 1.2],
                n_paths: 100_000,
                steps: 200,
                seed: 42,
            },
            calib: CalibSection {
                quotes: None,
                delta: 1e-3,
                tol: 1e-5,
                max_iterations: 80,
                fixed_k_extrapolation: false,
            },
            leverage: LeverageSection {
                surface: None,
                quotes: None,
                n_paths: 10_000,
                steps: 200,
                t_end: None,
                seed: 42,
                bins: None,
            },
            skew: SkewSection {
                t_min: 1e-6,
                t_max: 1.0,
                points_per_decade: 40,
                zeta_eps: 0.05,
                zeta_sensitivity: vec![0.025, 0.1],
                n_paths: 100_000,
                seed: 7,
                fourier_max_t: 0.02,
                slope_tol: 0.05,
                sim_refine: 1,
            },
            out_dir: PathBuf::from("."),
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f(x)).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Canonical flat text rendering; the config hash is FNV-1a over these
    /// bytes, so field order and number formatting must stay stable.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let m = &self.model;
        let _ = writeln!(s, "model.v0={}", fmt_f(m.v0));
        let _ = writeln!(s, "model.theta={}", fmt_f(m.theta));
        let _ = writeln!(s, "model.lambda={}", fmt_f(m.lambda));
        let _ = writeln!(s, "model.nu={}", fmt_f(m.nu));
        let _ = writeln!(s, "model.rho={}", fmt_f(m.rho));
        let _ = writeln!(s, "model.h={}", fmt_f(m.h));
        let _ = writeln!(s, "lift.n={}", self.lift_n);
        let _ = writeln!(s, "lift.gamma_first={}", fmt_f(self.gamma_first));
        let _ = writeln!(s, "lift.gamma_last={}", fmt_f(self.gamma_last));
        let _ = writeln!(
            s,
            "lift.file={}",
            self.lift_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let q = &self.quad;
        let _ = writeln!(s, "quadrature.damping={}", fmt_f(q.damping));
        let _ = writeln!(s, "quadrature.riccati_steps={}", q.riccati_steps);
        let _ = writeln!(s, "quadrature.rel_tol={}", fmt_f(q.rel_tol));
        let _ = writeln!(s, "quadrature.gl_points={}", q.gl_points);
        let _ = writeln!(s, "quadrature.max_panels={}", q.max_panels);
        let si = &self.sim;
        let _ = writeln!(s, "simulate.n_paths={}", si.n_paths);
        let _ = writeln!(s, "simulate.steps={}", si.steps);
        let _ = writeln!(s, "simulate.t_end={}", fmt_f(si.t_end));
        let _ = writeln!(s, "simulate.seed={}", si.seed);
        let _ = writeln!(s, "simulate.antithetic={}", si.antithetic);
        let _ = writeln!(s, "simulate.dump_paths={}", si.dump_paths);
        let p = &self.price;
        let method = match p.method {
            PriceMethod::Fourier => "fourier",
            PriceMethod::MonteCarlo => "mc",
        };
        let _ = writeln!(s, "price.method={method}");
        let _ = writeln!(s, "price.maturities={}", fmt_list(&p.maturities));
        let _ = writeln!(s, "price.strikes={}", fmt_list(&p.strikes));
        let _ = writeln!(s, "price.n_paths={}", p.n_paths);
        let _ = writeln!(s, "price.steps={}", p.steps);
        let _ = writeln!(s, "price.seed={}", p.seed);
        let c = &self.calib;
        let _ = writeln!(
            s,
            "calibrate.quotes={}",
            c.quotes.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "calibrate.delta={}", fmt_f(c.delta));
        let _ = writeln!(s, "calibrate.tol={}", fmt_f(c.tol));
        let _ = writeln!(s, "calibrate.max_iterations={}", c.max_iterations);
        let _ = writeln!(s, "calibrate.fixed_k_extrapolation={}", c.fixed_k_extrapolation);
        let l = &self.leverage;
        let _ = writeln!(
            s,
            "leverage.surface={}",
            l.surface.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(
            s,
            "leverage.quotes={}",
            l.quotes.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "leverage.n_paths={}", l.n_paths);
        let _ = writeln!(s, "leverage.steps={}", l.steps);
        let _ = writeln!(
            s,
            "leverage.t_end={}",
            l.t_end.map(fmt_f).unwrap_or_default()
        );
        let _ = writeln!(s, "leverage.seed={}", l.seed);
        let _ = writeln!(
            s,
            "leverage.bins={}",
            l.bins.map(|b| b.to_string()).unwrap_or_default()
        );
        let k = &self.skew;
        let _ = writeln!(s, "skew.t_min={}", fmt_f(k.t_min));
        let _ = writeln!(s, "skew.t_max={}", fmt_f(k.t_max));
        let _ = writeln!(s, "skew.points_per_decade={}", k.points_per_decade);
        let _ = writeln!(s, "skew.zeta_eps={}", fmt_f(k.zeta_eps));
        let _ = writeln!(s, "skew.zeta_sensitivity={}", fmt_list(&k.zeta_sensitivity));
        let _ = writeln!(s, "skew.n_paths={}", k.n_paths);
        let _ = writeln!(s, "skew.seed={}", k.seed);
        let _ = writeln!(s, "skew.fourier_max_t={}", fmt_f(k.fourier_max_t));
        let _ = writeln!(s, "skew.slope_tol={}", fmt_f(k.slope_tol));
        let _ = writeln!(s, "skew.sim_refine={}", k.sim_refine);
        s
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }

    /// The seed driving randomness in this run's command; deterministic
    /// commands report the seed their section carries anyway.
    fn active_seed(&self) -> u64 {
        match self.command.as_str() {
            "price" => self.price.seed,
            "calibrate-leverage" => self.leverage.seed,
            "skew-study" => self.skew.seed,
            _ => self.sim.seed,
        }
    }
}

/// Section/key accessor over a parsed TOML document that rejects unknown
/// keys, so configuration typos fail loudly.
struct TomlConf {
    root: toml::Table,
    origin: String,
}

impl TomlConf {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let root: toml::Table = text.parse().map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        Ok(TomlConf { root, origin: path.display().to_string() })
    }

    fn section(&self, name: &str) -> Result<Option<&toml::Table>> {
        match self.root.get(name) {
            None => Ok(None),
            Some(toml::Value::Table(t)) => Ok(Some(t)),
            Some(_) => Err(Error::Config(format!(
                "{}: [{name}] must be a table",
                self.origin
            ))),
        }
    }

    fn check_keys(&self, name: &str, allowed: &[&str]) -> Result<()> {
        if let Some(t) = self.section(name)? {
            for key in t.keys() {
                if !allowed.contains(&key.as_str()) {
                    return Err(Error::Config(format!(
                        "{}: unknown key '{key}' in [{name}] (allowed: {})",
                        self.origin,
                        allowed.join(", ")
                    )));
                }
            }
        }
        Ok(())
    }

    fn value(&self, section: &str, key: &str) -> Option<&toml::Value> {
        self.root.get(section).and_then(|v| v.as_table()).and_then(|t| t.get(key))
    }

    fn f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::Float(f)) => Ok(Some(*f)),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(_) => Err(self.type_err(section, key, "a number")),
        }
    }

    fn usize(&self, section: &str, key: &str) -> Result<Option<usize>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(_) => Err(self.type_err(section, key, "a non-negative integer")),
        }
    }

    fn u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(_) => Err(self.type_err(section, key, "a non-negative integer")),
        }
    }

    fn bool(&self, section: &str, key: &str) -> Result<Option<bool>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(*b)),
            Some(_) => Err(self.type_err(section, key, "a boolean")),
        }
    }

    fn string(&self, section: &str, key: &str) -> Result<Option<String>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(self.type_err(section, key, "a string")),
        }
    }

    fn f64_array(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        match self.value(section, key) {
            None => Ok(None),
            Some(toml::Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    toml::Value::Float(f) => Ok(*f),
                    toml::Value::Integer(i) => Ok(*i as f64),
                    _ => Err(self.type_err(section, key, "an array of numbers")),
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
            Some(_) => Err(self.type_err(section, key, "an array of numbers")),
        }
    }

    fn type_err(&self, section: &str, key: &str, want: &str) -> Error {
        Error::Config(format!("{}: [{section}] {key} must be {want}", self.origin))
    }
}

fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} entry '{s}'")))
        })
        .collect()
}

const MODEL_KEYS: &[&str] = &["v0", "theta", "lambda", "nu", "rho", "h"];
const LIFT_KEYS: &[&str] = &["n", "gamma_first", "gamma_last", "file"];
const QUAD_KEYS: &[&str] = &["damping", "riccati_steps", "rel_tol", "gl_points", "max_panels"];
const SIM_KEYS: &[&str] = &["n_paths", "steps", "t_end", "seed", "antithetic", "dump_paths"];
const PRICE_KEYS: &[&str] = &["method", "maturities", "strikes", "n_paths", "steps", "seed"];
const CALIB_KEYS: &[&str] =
    &["quotes", "delta", "tol", "max_iterations", "fixed_k_extrapolation"];
const LEVERAGE_KEYS: &[&str] =
    &["surface", "quotes", "n_paths", "steps", "t_end", "seed", "bins"];
const SKEW_KEYS: &[&str] = &[
    "t_min",
    "t_max",
    "points_per_decade",
    "zeta_eps",
    "zeta_sensitivity",
    "n_paths",
    "seed",
    "fourier_max_t",
    "slope_tol",
    "sim_refine",
];
const OUTPUT_KEYS: &[&str] = &["dir"];
const SECTIONS: &[(&str, &[&str])] = &[
    ("model", MODEL_KEYS),
    ("lift", LIFT_KEYS),
    ("quadrature", QUAD_KEYS),
    ("simulate", SIM_KEYS),
    ("price", PRICE_KEYS),
    ("calibrate", CALIB_KEYS),
    ("leverage", LEVERAGE_KEYS),
    ("skew", SKEW_KEYS),
    ("output", OUTPUT_KEYS),
];

fn apply_toml(cfg: &mut RunConfig, conf: &TomlConf) -> Result<()> {
    for key in conf.root.keys() {
        if !SECTIONS.iter().any(|(s, _)| s == key) {
            return Err(Error::Config(format!(
                "{}: unknown section [{key}]",
                conf.origin
            )));
        }
    }
    for (section, keys) in SECTIONS {
        conf.check_keys(section, keys)?;
    }

    macro_rules! set {
        ($field:expr, $getter:ident, $section:literal, $key:literal) => {
            if let Some(v) = conf.$getter($section, $key)? {
                $field = v;
            }
        };
    }
    set!(cfg.model.v0, f64, "model", "v0");
    set!(cfg.model.theta, f64, "model", "theta");
    set!(cfg.model.lambda, f64, "model", "lambda");
    set!(cfg.model.nu, f64, "model", "nu");
    set!(cfg.model.rho, f64, "model", "rho");
    set!(cfg.model.h, f64, "model", "h");
    set!(cfg.lift_n, usize, "lift", "n");
    set!(cfg.gamma_first, f64, "lift", "gamma_first");
    set!(cfg.gamma_last, f64, "lift", "gamma_last");
    if let Some(v) = conf.string("lift", "file")? {
        cfg.lift_file = Some(PathBuf::from(v));
    }
    set!(cfg.quad.damping, f64, "quadrature", "damping");
    set!(cfg.quad.riccati_steps, usize, "quadrature", "riccati_steps");
    set!(cfg.quad.rel_tol, f64, "quadrature", "rel_tol");
    set!(cfg.quad.gl_points, usize, "quadrature", "gl_points");
    set!(cfg.quad.max_panels, usize, "quadrature", "max_panels");
    set!(cfg.sim.n_paths, usize, "simulate", "n_paths");
    set!(cfg.sim.steps, usize, "simulate", "steps");
    set!(cfg.sim.t_end, f64, "simulate", "t_end");
    set!(cfg.sim.seed, u64, "simulate", "seed");
    set!(cfg.sim.antithetic, bool, "simulate", "antithetic");
    set!(cfg.sim.dump_paths, bool, "simulate", "dump_paths");
    if let Some(v) = conf.string("price", "method")? {
        cfg.price.method = parse_method(&v)?;
    }
    if let Some(v) = conf.f64_array("price", "maturities")? {
        cfg.price.maturities = v;
    }
    if let Some(v) = conf.f64_array("price", "strikes")? {
        cfg.price.strikes = v;
    }
    set!(cfg.price.n_paths, usize, "price", "n_paths");
    set!(cfg.price.steps, usize, "price", "steps");
    set!(cfg.price.seed, u64, "price", "seed");
    if let Some(v) = conf.string("calibrate", "quotes")? {
        cfg.calib.quotes = Some(PathBuf::from(v));
    }
    set!(cfg.calib.delta, f64, "calibrate", "delta");
    set!(cfg.calib.tol, f64, "calibrate", "tol");
    set!(cfg.calib.max_iterations, usize, "calibrate", "max_iterations");
    set!(cfg.calib.fixed_k_extrapolation, bool, "calibrate", "fixed_k_extrapolation");
    if let Some(v) = conf.string("leverage", "surface")? {
        cfg.leverage.surface = Some(PathBuf::from(v));
    }
    if let Some(v) = conf.string("leverage", "quotes")? {
        cfg.leverage.quotes = Some(PathBuf::from(v));
    }
    set!(cfg.leverage.n_paths, usize, "leverage", "n_paths");
    set!(cfg.leverage.steps, usize, "leverage", "steps");
    if let Some(v) = conf.f64("leverage", "t_end")? {
        cfg.leverage.t_end = Some(v);
    }
    set!(cfg.leverage.seed, u64, "leverage", "seed");
    if let Some(v) = conf.usize("leverage", "bins")? {
        cfg.leverage.bins = Some(v);
    }
    set!(cfg.skew.t_min, f64, "skew", "t_min");
    set!(cfg.skew.t_max, f64, "skew", "t_max");
    set!(cfg.skew.points_per_decade, usize, "skew", "points_per_decade");
    set!(cfg.skew.zeta_eps, f64, "skew", "zeta_eps");
    if let Some(v) = conf.f64_array("skew", "zeta_sensitivity")? {
        cfg.skew.zeta_sensitivity = v;
    }
    set!(cfg.skew.n_paths, usize, "skew", "n_paths");
    set!(cfg.skew.seed, u64, "skew", "seed");
    set!(cfg.skew.fourier_max_t, f64, "skew", "fourier_max_t");
    set!(cfg.skew.slope_tol, f64, "skew", "slope_tol");
    set!(cfg.skew.sim_refine, usize, "skew", "sim_refine");
    if let Some(v) = conf.string("output", "dir")? {
        cfg.out_dir = PathBuf::from(v);
    }
    Ok(())
}

fn parse_method(text: &str) -> Result<PriceMethod> {
    match text {
        "fourier" => Ok(PriceMethod::Fourier),
        "mc" => Ok(PriceMethod::MonteCarlo),
        other => Err(Error::Config(format!(
            "price method must be 'fourier' or 'mc', got '{other}'"
        ))),
    }
}

fn apply_flags(cfg: &mut RunConfig, cli: &Cli) -> Result<()> {
    let m = &cli.model;
    if let Some(v) = m.v0 {
        cfg.model.v0 = v;
    }
    if let Some(v) = m.theta {
        cfg.model.theta = v;
    }
    if let Some(v) = m.lambda {
        cfg.model.lambda = v;
    }
    if let Some(v) = m.nu {
        cfg.model.nu = v;
    }
    if let Some(v) = m.rho {
        cfg.model.rho = v;
    }
    if let Some(v) = m.hurst {
        cfg.model.h = v;
    }
    if let Some(v) = cli.lift.n_factors {
        cfg.lift_n = v;
    }
    if let Some(v) = cli.lift.gamma_first {
        cfg.gamma_first = v;
    }
    if let Some(v) = cli.lift.gamma_last {
        cfg.gamma_last = v;
    }
    if let Some(v) = &cli.lift.lift_file {
        cfg.lift_file = Some(v.clone());
    }
    if let Some(v) = &cli.out {
        cfg.out_dir = v.clone();
    }

    match &cli.command {
        CommandArgs::Lift => cfg.command = "lift".into(),
        CommandArgs::Simulate(a) => {
            cfg.command = "simulate".into();
            if let Some(v) = a.n_paths {
                cfg.sim.n_paths = v;
            }
            if let Some(v) = a.steps {
                cfg.sim.steps = v;
            }
            if let Some(v) = a.t_end {
                cfg.sim.t_end = v;
            }
            if let Some(v) = a.seed {
                cfg.sim.seed = v;
            }
            if let Some(v) = a.antithetic {
                cfg.sim.antithetic = v;
            }
            if a.dump_paths {
                cfg.sim.dump_paths = true;
            }
        }
        CommandArgs::Price(a) => {
            cfg.command = "price".into();
            if let Some(v) = &a.method {
                cfg.price.method = parse_method(v)?;
            }
            if let Some(v) = &a.maturities {
                cfg.price.maturities = parse_f64_list(v, "maturity")?;
            }
            if let Some(v) = &a.strikes {
                cfg.price.strikes = parse_f64_list(v, "strike")?;
            }
            if let Some(v) = a.n_paths {
                cfg.price.n_paths = v;
            }
            if let Some(v) = a.steps {
                cfg.price.steps = v;
            }
            if let Some(v) = a.seed {
                cfg.price.seed = v;
            }
        }
        CommandArgs::CalibrateLv(a) => {
            cfg.command = "calibrate-lv".into();
            if let Some(v) = &a.quotes {
                cfg.calib.quotes = Some(v.clone());
            }
            if let Some(v) = a.delta {
                cfg.calib.delta = v;
            }
            if let Some(v) = a.tol {
                cfg.calib.tol = v;
            }
            if let Some(v) = a.max_iterations {
                cfg.calib.max_iterations = v;
            }
        }
        CommandArgs::CalibrateLeverage(a) => {
            cfg.command = "calibrate-leverage".into();
            if let Some(v) = &a.surface {
                cfg.leverage.surface = Some(v.clone());
            }
            if let Some(v) = &a.quotes {
                cfg.leverage.quotes = Some(v.clone());
            }
            if let Some(v) = a.n_paths {
                cfg.leverage.n_paths = v;
            }
            if let Some(v) = a.steps {
                cfg.leverage.steps = v;
            }
            if let Some(v) = a.t_end {
                cfg.leverage.t_end = Some(v);
            }
            if let Some(v) = a.seed {
                cfg.leverage.seed = v;
            }
            if let Some(v) = a.bins {
                cfg.leverage.bins = Some(v);
            }
        }
        CommandArgs::SkewStudy(a) => {
            cfg.command = "skew-study".into();
            if let Some(v) = a.t_min {
                cfg.skew.t_min = v;
            }
            if let Some(v) = a.t_max {
                cfg.skew.t_max = v;
            }
            if let Some(v) = a.points_per_decade {
                cfg.skew.points_per_decade = v;
            }
            if let Some(v) = a.zeta_eps {
                cfg.skew.zeta_eps = v;
            }
            if let Some(v) = a.n_paths {
                cfg.skew.n_paths = v;
            }
            if let Some(v) = a.seed {
                cfg.skew.seed = v;
            }
            if let Some(v) = a.fourier_max_t {
                cfg.skew.fourier_max_t = v;
            }
            if let Some(v) = a.slope_tol {
                cfg.skew.slope_tol = v;
            }
        }
    }
    Ok(())
}

/// A file the run produced or consumed, with a content hash for the
/// manifest.
struct FileNote {
    role: &'static str,
    path: PathBuf,
    content_hash: u64,
}

/// Collects output text, written files, and manifest lines for one run.
struct RunOutput {
    dir: PathBuf,
    provenance: String,
    files: Vec<FileNote>,
    results: Vec<(String, String)>,
}

impl RunOutput {
    fn new(cfg: &RunConfig, hash: u64) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
            path: cfg.out_dir.display().to_string(),
            source: e,
        })?;
        let provenance = format!(
            "# hmlv {}\n# command: {}\n# config-hash: {hash:016x}\n# seed: {}\n",
            env!("CARGO_PKG_VERSION"),
            cfg.command,
            cfg.active_seed()
        );
        Ok(RunOutput { dir: cfg.out_dir.clone(), provenance, files: Vec::new(), results: Vec::new() })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let full = format!("{}{body}", self.provenance);
        fs::write(&path, &full).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.files.push(FileNote {
            role: "output",
            path: path.clone(),
            content_hash: fnv1a64(full.as_bytes()),
        });
        Ok(path)
    }

    fn note_input(&mut self, path: &Path, content: &str) {
        self.files.push(FileNote {
            role: "input",
            path: path.to_path_buf(),
            content_hash: fnv1a64(content.as_bytes()),
        });
    }

    fn result(&mut self, key: &str, value: String) {
        self.results.push((key.to_string(), value));
    }

    fn finish(self, cfg: &RunConfig, hash: u64) -> Result<Vec<PathBuf>> {
        let mut manifest = self.provenance.clone();
        manifest.push_str("\n[files]\n");
        for note in &self.files {
            let _ = writeln!(
                manifest,
                "{}: {} fnv1a64={:016x}",
                note.role,
                note.path.display(),
                note.content_hash
            );
        }
        manifest.push_str("\n[results]\n");
        for (k, v) in &self.results {
            let _ = writeln!(manifest, "{k}: {v}");
        }
        manifest.push_str("\n[config]\n");
        manifest.push_str(&cfg.canonical());
        let name = format!("{}_{hash:016x}_manifest.txt", cfg.command);
        let path = self.dir.join(name);
        fs::write(&path, manifest).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut all: Vec<PathBuf> = self
            .files
            .iter()
            .filter(|n| n.role == "output")
            .map(|n| n.path.clone())
            .collect();
        all.push(path);
        Ok(all)
    }
}

fn make_lift(cfg: &RunConfig) -> Result<LiftSpec> {
    if let Some(path) = &cfg.lift_file {
        let file = fs::File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        return LiftSpec::read_nodes(BufReader::new(file));
    }
    if cfg.model.h == 0.5 {
        return build_lift(0.5, 1, 1.0, 0.5);
    }
    let (horizon, short) =
        scales_for_gamma_range(cfg.model.h, cfg.lift_n, cfg.gamma_first, cfg.gamma_last)?;
    build_lift(cfg.model.h, cfg.lift_n, horizon, short)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn batch_summary(batch: &PathBatch) -> String {
    let mut body = String::from("time,spot_mean,spot_stderr,variance_mean,variance_stderr\n");
    let m = batch.n_paths();
    for (idx, &t) in batch.grid().iter().enumerate() {
        let (sm, ss) = mean_stderr((0..m).map(|p| batch.spot(p, idx)));
        let (vm, vs) = mean_stderr((0..m).map(|p| batch.variance(p, idx)));
        let _ = writeln!(body, "{t:.16e},{sm:.16e},{ss:.16e},{vm:.16e},{vs:.16e}");
    }
    body
}

fn path_matrix(batch: &PathBatch, value: impl Fn(usize, usize) -> f64) -> String {
    let mut body = String::from("path");
    for &t in batch.grid() {
        let _ = write!(body, ",{t:.16e}");
    }
    body.push('\n');
    for p in 0..batch.n_paths() {
        let _ = write!(body, "{p}");
        for idx in 0..batch.grid().len() {
            let _ = write!(body, ",{:.16e}", value(p, idx));
        }
        body.push('\n');
    }
    body
}

fn run_lift(cfg: &RunConfig, out: &mut RunOutput) -> Result<()> {
    let lift = make_lift(cfg)?;
    let grid = logspace(1e-3, 2.0, 200);
    let err = kernel_approx_error(&lift, cfg.model.h, &grid)?;
    let mut body = String::from("# columns: c gamma\n");
    let mut nodes = Vec::new();
    lift.write_nodes(&mut nodes).expect("write to vec cannot fail");
    body.push_str(&String::from_utf8(nodes).expect("node text is ascii"));
    out.write(&format!("lift_{:016x}.csv", cfg.config_hash()), &body)?;
    out.result("n", lift.n().to_string());
    out.result("gamma_min", fmt_f(lift.gamma_min()));
    out.result("gamma_max", fmt_f(lift.gamma_max()));
    out.result("tau_short", fmt_f(lift.tau_short()));
    out.result("kernel_rel_error_sup[1e-3,2]", fmt_f(err.sup));
    out.result("kernel_rel_error_l2[1e-3,2]", fmt_f(err.l2));
    Ok(())
}

fn run_simulate(cfg: &RunConfig, out: &mut RunOutput) -> Result<()> {
    let lift = make_lift(cfg)?;
    let grid = uniform_grid(cfg.sim.t_end, cfg.sim.steps);
    let sim = SimConfig::new(cfg.sim.n_paths, grid, cfg.sim.seed, cfg.sim.antithetic);
    let batch = simulate_lift(&cfg.model, &lift, &sim)?;
    let hash = cfg.config_hash();
    out.write(&format!("simulate_{hash:016x}.csv"), &batch_summary(&batch))?;
    if cfg.sim.dump_paths {
        out.write(
            &format!("simulate_{hash:016x}_spot.csv"),
            &path_matrix(&batch, |p, i| batch.spot(p, i)),
        )?;
        out.write(
            &format!("simulate_{hash:016x}_variance.csv"),
            &path_matrix(&batch, |p, i| batch.variance(p, i)),
        )?;
    }
    out.result("n_paths", batch.n_paths().to_string());
    out.result("n_times", batch.grid().len().to_string());
    Ok(())
}

fn run_price(cfg: &RunConfig, out: &mut RunOutput) -> Result<()> {
    let p = &cfg.price;
    if p.maturities.is_empty() || p.strikes.is_empty() {
        return Err(Error::Config("price needs at least one maturity and one strike".into()));
    }
    let mut body = String::from("maturity,strike,method,price,stderr,implied_vol\n");
    match p.method {
        PriceMethod::Fourier => {
            for &t in &p.maturities {
                let prices = rough_heston_smile(t, &p.strikes, &cfg.model, &cfg.quad)?;
                for (&k, &price) in p.strikes.iter().zip(&prices) {
                    let iv = implied_vol(price, t, k, OptionKind::Call)?;
                    let _ = writeln!(
                        body,
                        "{t:.16e},{k:.16e},fourier,{price:.16e},{:.16e},{iv:.16e}",
                        0.0
                    );
                }
            }
        }
        PriceMethod::MonteCarlo => {
            let lift = make_lift(cfg)?;
            let t_end = p.maturities.iter().cloned().fold(f64::MIN, f64::max);
            let grid = merge_grid(&uniform_grid(t_end, p.steps), &p.maturities);
            let mut sim = SimConfig::new(p.n_paths, grid, p.seed, true);
            sim.record_times = Some(sorted_unique(&p.maturities));
            let batch = simulate_lift(&cfg.model, &lift, &sim)?;
            for &t in &p.maturities {
                for &k in &p.strikes {
                    let (price, se) = mc_price(&batch, t, k, OptionKind::Call)?;
                    let iv = implied_vol(price, t, k, OptionKind::Call)?;
                    let _ = writeln!(
                        body,
                        "{t:.16e},{k:.16e},mc,{price:.16e},{se:.16e},{iv:.16e}"
                    );
                }
            }
        }
    }
    out.write(&format!("price_{:016x}.csv", cfg.config_hash()), &body)?;
    Ok(())
}

fn sorted_unique(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

/// Union of two increasing grids, dropping near-duplicates (1e-9 relative).
fn merge_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.extend_from_slice(b);
    let mut v = sorted_unique(&v);
    v.dedup_by(|next, prev| (*next - *prev).abs() <= 1e-9 * next.abs());
    v
}

fn run_calibrate_lv(cfg: &RunConfig, out: &mut RunOutput) -> Result<()> {
    let quotes_path = cfg.calib.quotes.clone().ok_or_else(|| {
        Error::Config("calibrate-lv needs a quote file ([calibrate] quotes or --quotes)".into())
    })?;
    let text = read_text(&quotes_path)?;
    out.note_input(&quotes_path, &text);
    let quotes = QuoteLattice::from_csv_str(&text, &quotes_path.display().to_string())?;
    let calib = CalibConfig {
        tol: cfg.calib.tol,
        max_iterations: cfg.calib.max_iterations,
        fixed_k_extrapolation: cfg.calib.fixed_k_extrapolation,
        ..CalibConfig::default()
    };
    let (surface, report) =
        calibrate_local_vol(&quotes, cfg.model.h, cfg.calib.delta, &calib)?;

    let hash = cfg.config_hash();
    let mut body = String::from("maturity,strike,market_vol,model_vol,error_bps\n");
    let mut max_bps = 0.0f64;
    for (i, &t) in quotes.maturities().iter().enumerate() {
        for (j, &k) in quotes.strikes()[i].iter().enumerate() {
            let market = quotes.implied_vols()[i][j];
            let res = report.residuals[i][j];
            max_bps = max_bps.max(res.abs() * 1e4);
            let _ = writeln!(
                body,
                "{t:.16e},{k:.16e},{market:.16e},{:.16e},{:.16e}",
                market + res,
                res * 1e4
            );
        }
    }
    out.write(&format!("calibrate-lv_{hash:016x}.csv"), &body)?;
    out.write(
        &format!("calibrate-lv_{hash:016x}_surface.csv"),
        &surface.to_csv_string(),
    )?;
    out.result("iterations", report.iterations.to_string());
    out.result("max_error_bps", fmt_f(max_bps));
    out.result(
        "iteration_max_errors",
        report.max_errors.iter().map(|&e| fmt_f(e)).collect::<Vec<_>>().join(","),
    );
    Ok(())
}

fn run_calibrate_leverage(cfg: &RunConfig, out: &mut RunOutput) -> Result<()> {
    let l = &cfg.leverage;
    let surface_path = l.surface.clone().ok_or_else(|| {
        Error::Config(
            "calibrate-leverage needs a surface file ([leverage] surface or --surface)".into(),
        )
    })?;
    let text = read_text(&surface_path)?;
    out.note_input(&surface_path, &text);
    let surface = LocalVolSurface::from_csv_str(&text, &surface_path.display().to_string())?;

    let quotes = match &l.quotes {
        Some(path) => {
            let qtext = read_text(path)?;
            out.note_input(path, &qtext);
            Some(QuoteLattice::from_csv_str(&qtext, &path.display().to_string())?)
        }
        None => None,
    };

    let t_end = l.t_end.unwrap_or_else(|| {
        *surface.maturities().last().expect("surface has at least one maturity")
    });
    let mut grid = uniform_grid(t_end, l.steps);
    let mut record_times = None;
    if let Some(q) = &quotes {
        grid = merge_grid(&grid, q.maturities());
        record_times = Some(q.maturities().to_vec());
    }
    let lift = make_lift(cfg)?;
    let mut sim = SimConfig::new(l.n_paths, grid, l.seed, true);
    sim.record_times = record_times;
    sim.leverage_bins = l.bins;
    let (batch, leverage) = simulate_hmlv(&cfg.model, &lift, &surface, &sim)?;

    let hash = cfg.config_hash();
    out.write(&format!("calibrate-leverage_{hash:016x}.csv"), &leverage.to_delimited())?;
    out.write(
        &format!("calibrate-leverage_{hash:016x}_summary.csv"),
        &batch_summary(&batch),
    )?;
    let clamped: usize = leverage.steps.iter().map(|s| s.clamp_count).sum();
    out.result("clamped_evaluations", clamped.to_string());
    out.result("steps", leverage.steps.len().to_string());

    if let Some(q) = &quotes {
        let mut body = String::from("maturity,strike,market_vol,mc_vol,error_bps,stderr_bps\n");
        let mut max_bps = 0.0f64;
        for (i, &t) in q.maturities().iter().enumerate() {
            for (j, &k) in q.strikes()[i].iter().enumerate() {
                let market = q.implied_vols()[i][j];
                let (price, se) = mc_price(&batch, t, k, OptionKind::Call)?;
                let iv = implied_vol(price, t, k, OptionKind::Call)?;
                let vega = black_vega(t, k, iv).max(1e-300);
                let err_bps = (iv - market) * 1e4;
                max_bps = max_bps.max(err_bps.abs());
                let _ = writeln!(
                    body,
                    "{t:.16e},{k:.16e},{market:.16e},{iv:.16e},{err_bps:.16e},{:.16e}",
                    se / vega * 1e4
                );
            }
        }
        out.write(&format!("calibrate-leverage_{hash:016x}_errors.csv"), &body)?;
        out.result("max_reprice_error_bps", fmt_f(max_bps));
    }
    Ok(())
}

fn run_skew_study(cfg: &RunConfig, out: &mut RunOutput) -> Result<()> {
    let k = &cfg.skew;
    let mut study_cfg =
        SkewStudyConfig::new(cfg.model, cfg.lift_n, cfg.gamma_first, cfg.gamma_last);
    study_cfg.t_min = k.t_min;
    study_cfg.t_max = k.t_max;
    study_cfg.points_per_decade = k.points_per_decade;
    study_cfg.zeta_eps = k.zeta_eps;
    study_cfg.zeta_sensitivity = k.zeta_sensitivity.clone();
    study_cfg.n_paths = k.n_paths;
    study_cfg.seed = k.seed;
    study_cfg.fourier_max_t = k.fourier_max_t;
    study_cfg.quad = cfg.quad.clone();
    study_cfg.sim_refine = k.sim_refine;
    study_cfg.slope_tol = k.slope_tol;
    let study = skew_ratio_study(&study_cfg)?;

    let hash = cfg.config_hash();
    out.write(&format!("skew-study_{hash:016x}.csv"), &study.to_delimited())?;
    let mut slopes = String::from("candidate_t,slope_sigma,slope_eta\n");
    for (i, &t) in study.diag_sigma.candidate_times.iter().enumerate() {
        let _ = writeln!(
            slopes,
            "{t:.16e},{:.16e},{:.16e}",
            study.diag_sigma.candidate_slopes[i], study.diag_eta.candidate_slopes[i]
        );
    }
    out.write(&format!("skew-study_{hash:016x}_slopes.csv"), &slopes)?;
    out.result("tau_short", fmt_f(study.tau_short));
    out.result("beta", fmt_f(study.beta));
    out.result("alpha_sigma", fmt_f(study.alpha_sigma));
    out.result("alpha_eta", fmt_f(study.alpha_eta));
    out.result("t_crit_sigma", fmt_f(study.t_crit_sigma));
    out.result("t_crit_eta", fmt_f(study.t_crit_eta));
    out.result("ratio", fmt_f(study.ratio));
    out.result("slope_at_t_crit_sigma", fmt_f(study.diag_sigma.slope_at_crit));
    out.result("slope_at_t_crit_eta", fmt_f(study.diag_eta.slope_at_crit));
    for (z, r) in &study.zeta_sensitivity {
        out.result(&format!("ratio_zeta_{z}"), fmt_f(*r));
    }
    Ok(())
}

/// Parse arguments, run the requested command, and report written files on
/// stdout. Returns the process exit code.
pub fn main_entry<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // Ignore the error if a pool already exists (repeat calls in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = RunConfig::default();
    if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    if let Some(path) = &cli.config {
        let conf = TomlConf::load(path)?;
        apply_toml(&mut cfg, &conf)?;
    }
    apply_flags(&mut cfg, cli)?;
    cfg.model.validate()?;

    let hash = cfg.config_hash();
    let mut out = RunOutput::new(&cfg, hash)?;
    match cfg.command.as_str() {
        "lift" => run_lift(&cfg, &mut out)?,
        "simulate" => run_simulate(&cfg, &mut out)?,
        "price" => run_price(&cfg, &mut out)?,
        "calibrate-lv" => run_calibrate_lv(&cfg, &mut out)?,
        "calibrate-leverage" => run_calibrate_leverage(&cfg, &mut out)?,
        "skew-study" => run_skew_study(&cfg, &mut out)?,
        other => return Err(Error::Config(format!("unknown command '{other}'"))),
    }
    out.finish(&cfg, hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_hash_matches_reference_vectors() {
        // Published FNV-1a 64-bit test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn canonical_config_is_stable_and_hash_sensitive() {
        let mut cfg = RunConfig::default();
        cfg.command = "simulate".into();
        let h1 = cfg.config_hash();
        assert_eq!(h1, cfg.config_hash());
        cfg.sim.seed += 1;
        assert_ne!(h1, cfg.config_hash());
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        let dir = std::env::temp_dir().join("hmlv-cli-test-unknown-key");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.toml");
        fs::write(&path, "[model]\nv0 = 0.04\nbogus = 1\n").unwrap();
        let conf = TomlConf::load(&path).unwrap();
        let mut cfg = RunConfig::default();
        let err = apply_toml(&mut cfg, &conf).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn toml_overrides_then_flags_win() {
        let dir = std::env::temp_dir().join("hmlv-cli-test-priority");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("conf.toml");
        fs::write(&path, "[model]\nv0 = 0.09\n[simulate]\nn_paths = 500\nseed = 9\n").unwrap();
        let conf = TomlConf::load(&path).unwrap();
        let mut cfg = RunConfig::default();
        apply_toml(&mut cfg, &conf).unwrap();
        assert_eq!(cfg.model.v0, 0.09);
        assert_eq!(cfg.sim.n_paths, 500);
        let cli = Cli::try_parse_from(["hmlv", "simulate", "--n-paths", "64", "--v0", "0.04"])
            .unwrap();
        apply_flags(&mut cfg, &cli).unwrap();
        assert_eq!(cfg.model.v0, 0.04);
        assert_eq!(cfg.sim.n_paths, 64);
        assert_eq!(cfg.sim.seed, 9);
        assert_eq!(cfg.command, "simulate");
    }

    #[test]
    fn maturity_list_parsing_rejects_garbage() {
        assert_eq!(parse_f64_list("0.25, 1.0", "maturity").unwrap(), vec![0.25, 1.0]);
        assert!(parse_f64_list("0.25,x", "maturity").is_err());
    }
}
