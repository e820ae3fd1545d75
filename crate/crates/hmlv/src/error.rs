use thiserror::Error;

/// Unified error type for the crate.
///
/// Variants are grouped by how the command-line front end maps them to exit
/// codes: configuration problems (bad parameters, inconsistent grids), data
/// problems (files that do not exist or do not parse), and numerical failures
/// (diverging solvers, arbitrage violations, non-convergent fixed points).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid domain input: {0}")]
    Domain(String),

    #[error("data error in {path}: {message}")]
    Data { path: String, message: String },

    #[error("simulation produced a non-finite value at step {step} (t = {t})")]
    Simulation { step: usize, t: f64 },

    #[error("Riccati solver diverged at step {step} of {steps} (|psi| > {guard:e})")]
    RiccatiDivergence { step: usize, steps: usize, guard: f64 },

    #[error("Fourier quadrature did not converge: successive refinements differ by {delta:e} (tolerance {tol:e})")]
    QuadratureNonConvergence { delta: f64, tol: f64 },

    #[error("price {price} outside the no-arbitrage band: {bound} bound violated (t = {t}, k = {k})")]
    InversionBand { price: f64, t: f64, k: f64, bound: &'static str },

    #[error("implied-vol inversion failed to converge (t = {t}, k = {k}, price = {price})")]
    InversionNoConvergence { price: f64, t: f64, k: f64 },

    #[error("arbitrage violation in the implied surface at (t = {t}, k = {k}): {what}")]
    Arbitrage { t: f64, k: f64, what: &'static str },

    #[error("conditional-expectation estimator needs at least {bins} particles, got {particles}")]
    Estimator { particles: usize, bins: usize },

    #[error("local-vol calibration did not converge after {iterations} iterations (max vol error {max_err:e})")]
    Calibration { iterations: usize, max_err: f64, residuals: Vec<Vec<f64>> },

    #[error("fixed-slope regression found no critical time with slope within {tol} of {beta} (closest slope {closest})")]
    Regression { beta: f64, tol: f64, closest: f64 },

    #[error("PDE solver instability: {0}")]
    Pde(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit-code family used by the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Data { .. } | Error::Io { .. } => 3,
            _ => 4,
        }
    }
}
