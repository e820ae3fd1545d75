//! Python bindings for the hmlv engine.
//!
//! The module mirrors the Rust API at the granularity a notebook wants:
//! model parameters, the kernel lift, Fourier and Monte Carlo pricing,
//! local-vol calibration, and the skew-study machinery. Matrices cross the
//! boundary as nested lists; conversion costs are negligible next to the
//! numerics behind them.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hmlv::black::{implied_vol as rs_implied_vol, mc_price as rs_mc_price, OptionKind};
use hmlv::error::Error;
use hmlv::fourier::{
    heston_cf_price as rs_heston_cf_price, rough_heston_cf_price as rs_rough_cf_price,
    rough_heston_smile as rs_rough_smile, QuadConfig,
};
use hmlv::kernel::{
    build_lift as rs_build_lift, fractional_kernel as rs_fractional_kernel,
    kernel_approx_error as rs_kernel_error, scales_for_gamma_range, LiftSpec,
};
use hmlv::params::ModelParams as RsParams;
use hmlv::sim::{
    simulate_hmlv as rs_simulate_hmlv, simulate_lift as rs_simulate_lift, uniform_grid,
    PathBatch as RsBatch, SimConfig,
};
use hmlv::skew::{
    atm_skew_implied, atm_skew_local, fixed_slope_regression_with_tol, skew_ratio_study,
    FourierSmile, SkewStudyConfig,
};
use hmlv::surface::{
    calibrate_local_vol as rs_calibrate, dupire_local_vol_logm as rs_dupire_logm, CalibConfig,
    LocalVolSurface as RsSurface, QuoteLattice as RsQuotes, VolDerivsLogm,
};

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn kind_from_str(kind: &str) -> PyResult<OptionKind> {
    match kind {
        "call" => Ok(OptionKind::Call),
        "put" => Ok(OptionKind::Put),
        other => Err(PyValueError::new_err(format!(
            "option kind must be 'call' or 'put', got '{other}'"
        ))),
    }
}

/// Rough-Heston parameter set (v0, theta, lambda, nu, rho, h).
#[pyclass(name = "ModelParams", module = "hmlv_py", skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyModelParams {
    inner: RsParams,
}

#[pymethods]
impl PyModelParams {
    #[new]
    fn new(v0: f64, theta: f64, lambda_: f64, nu: f64, rho: f64, h: f64) -> PyResult<Self> {
        Ok(PyModelParams {
            inner: RsParams::new(v0, theta, lambda_, nu, rho, h).map_err(to_py)?,
        })
    }

    #[getter]
    fn v0(&self) -> f64 {
        self.inner.v0
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn nu(&self) -> f64 {
        self.inner.nu
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "ModelParams(v0={}, theta={}, lambda={}, nu={}, rho={}, h={})",
            p.v0, p.theta, p.lambda, p.nu, p.rho, p.h
        )
    }
}

/// Sum-of-exponentials approximation of the fractional kernel.
#[pyclass(name = "Lift", module = "hmlv_py")]
struct PyLift {
    inner: LiftSpec,
    h: f64,
}

#[pymethods]
impl PyLift {
    /// Nodes as a list of (weight, rate) pairs, rates ascending.
    fn nodes(&self) -> Vec<(f64, f64)> {
        self.inner.nodes().iter().map(|n| (n.c, n.gamma)).collect()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn gamma_min(&self) -> f64 {
        self.inner.gamma_min()
    }

    #[getter]
    fn gamma_max(&self) -> f64 {
        self.inner.gamma_max()
    }

    /// Shortest resolved time scale, 1/gamma_max.
    #[getter]
    fn tau_short(&self) -> f64 {
        self.inner.tau_short()
    }

    fn kernel_value(&self, t: f64) -> f64 {
        self.inner.kernel_value(t)
    }

    /// Relative sup and L2 kernel errors on a time grid.
    fn approx_error(&self, t_grid: Vec<f64>) -> PyResult<(f64, f64)> {
        let e = rs_kernel_error(&self.inner, self.h, &t_grid).map_err(to_py)?;
        Ok((e.sup, e.l2))
    }

    fn __repr__(&self) -> String {
        format!(
            "Lift(n={}, gamma=[{:.6e}, {:.6e}], h={})",
            self.inner.n(),
            self.inner.gamma_min(),
            self.inner.gamma_max(),
            self.h
        )
    }
}

/// Build an n-factor lift whose rates span [gamma_first, gamma_last].
#[pyfunction]
fn build_lift(h: f64, n: usize, gamma_first: f64, gamma_last: f64) -> PyResult<PyLift> {
    let inner = if h == 0.5 {
        rs_build_lift(0.5, 1, 1.0, 0.5).map_err(to_py)?
    } else {
        let (horizon, short) = scales_for_gamma_range(h, n, gamma_first, gamma_last).map_err(to_py)?;
        rs_build_lift(h, n, horizon, short).map_err(to_py)?
    };
    Ok(PyLift { inner, h })
}

/// Fractional kernel t^(H - 1/2) / Gamma(H + 1/2).
#[pyfunction]
fn fractional_kernel(t: f64, h: f64) -> PyResult<f64> {
    rs_fractional_kernel(t, h).map_err(to_py)
}

/// Monte Carlo paths recorded on a time grid.
#[pyclass(name = "PathBatch", module = "hmlv_py")]
struct PyBatch {
    inner: RsBatch,
}

#[pymethods]
impl PyBatch {
    #[getter]
    fn n_paths(&self) -> usize {
        self.inner.n_paths()
    }

    fn grid(&self) -> Vec<f64> {
        self.inner.grid().to_vec()
    }

    fn spot(&self, path: usize, time_idx: usize) -> f64 {
        self.inner.spot(path, time_idx)
    }

    fn variance(&self, path: usize, time_idx: usize) -> f64 {
        self.inner.variance(path, time_idx)
    }

    /// Call/put price and standard error at a recorded maturity.
    #[pyo3(signature = (t, k, kind = "call"))]
    fn price(&self, t: f64, k: f64, kind: &str) -> PyResult<(f64, f64)> {
        rs_mc_price(&self.inner, t, k, kind_from_str(kind)?).map_err(to_py)
    }
}

/// Simulate the lifted rough-Heston model on a uniform grid.
#[pyfunction]
#[pyo3(signature = (params, lift, n_paths, t_end, steps, seed, antithetic = true))]
fn simulate_lift(
    params: &PyModelParams,
    lift: &PyLift,
    n_paths: usize,
    t_end: f64,
    steps: usize,
    seed: u64,
    antithetic: bool,
) -> PyResult<PyBatch> {
    let cfg = SimConfig::new(n_paths, uniform_grid(t_end, steps), seed, antithetic);
    Ok(PyBatch { inner: rs_simulate_lift(&params.inner, &lift.inner, &cfg).map_err(to_py)? })
}

/// Simulate the local-vol extension; returns the paths and the leverage
/// table as tab-delimited text.
#[pyfunction]
#[pyo3(signature = (params, lift, surface, n_paths, t_end, steps, seed, antithetic = true))]
#[allow(clippy::too_many_arguments)]
fn simulate_hmlv(
    params: &PyModelParams,
    lift: &PyLift,
    surface: &PySurface,
    n_paths: usize,
    t_end: f64,
    steps: usize,
    seed: u64,
    antithetic: bool,
) -> PyResult<(PyBatch, String)> {
    let cfg = SimConfig::new(n_paths, uniform_grid(t_end, steps), seed, antithetic);
    let (batch, lev) =
        rs_simulate_hmlv(&params.inner, &lift.inner, &surface.inner, &cfg).map_err(to_py)?;
    Ok((PyBatch { inner: batch }, lev.to_delimited()))
}

/// Rough-Heston call prices by damped Fourier quadrature.
#[pyfunction]
fn fourier_smile(params: &PyModelParams, t: f64, strikes: Vec<f64>) -> PyResult<Vec<f64>> {
    rs_rough_smile(t, &strikes, &params.inner, &QuadConfig::default()).map_err(to_py)
}

/// Single rough-Heston call price.
#[pyfunction]
fn rough_heston_cf_price(params: &PyModelParams, t: f64, k: f64) -> PyResult<f64> {
    rs_rough_cf_price(t, k, &params.inner, &QuadConfig::default()).map_err(to_py)
}

/// Classical Heston call price (closed-form characteristic function).
#[pyfunction]
fn heston_cf_price(params: &PyModelParams, t: f64, k: f64) -> PyResult<f64> {
    rs_heston_cf_price(t, k, &params.inner, &QuadConfig::default()).map_err(to_py)
}

/// Black implied volatility of an undiscounted forward price.
#[pyfunction]
#[pyo3(signature = (price, t, k, kind = "call"))]
fn implied_vol(price: f64, t: f64, k: f64, kind: &str) -> PyResult<f64> {
    rs_implied_vol(price, t, k, kind_from_str(kind)?).map_err(to_py)
}

/// Implied-vol quote lattice.
#[pyclass(name = "QuoteLattice", module = "hmlv_py")]
struct PyQuotes {
    inner: RsQuotes,
}

#[pymethods]
impl PyQuotes {
    /// Parse the `maturity,strike,implied_vol` CSV format.
    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(PyQuotes { inner: RsQuotes::from_csv_str(text, "<python>").map_err(to_py)? })
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv_string()
    }

    fn maturities(&self) -> Vec<f64> {
        self.inner.maturities().to_vec()
    }

    fn strikes(&self) -> Vec<Vec<f64>> {
        self.inner.strikes().to_vec()
    }

    fn implied_vols(&self) -> Vec<Vec<f64>> {
        self.inner.implied_vols().to_vec()
    }

    #[getter]
    fn n_quotes(&self) -> usize {
        self.inner.n_quotes()
    }
}

/// Nodal local-volatility surface in singular coordinates.
#[pyclass(name = "LocalVolSurface", module = "hmlv_py")]
struct PySurface {
    inner: RsSurface,
}

#[pymethods]
impl PySurface {
    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(PySurface { inner: RsSurface::from_csv_str(text, "<python>").map_err(to_py)? })
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv_string()
    }

    /// Local volatility at (t, k).
    fn value(&self, t: f64, k: f64) -> f64 {
        self.inner.interpolate_psi(t, k)
    }

    #[getter]
    fn hurst(&self) -> f64 {
        self.inner.hurst()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta()
    }

    fn maturities(&self) -> Vec<f64> {
        self.inner.maturities().to_vec()
    }
}

/// Calibrate the nodal local-vol surface to quotes; returns the surface,
/// the per-node residuals (vol units), and the iteration count.
#[pyfunction]
#[pyo3(signature = (quotes, h, delta, tol = 1e-5, max_iterations = 80))]
fn calibrate_local_vol(
    quotes: &PyQuotes,
    h: f64,
    delta: f64,
    tol: f64,
    max_iterations: usize,
) -> PyResult<(PySurface, Vec<Vec<f64>>, usize)> {
    let cfg = CalibConfig { tol, max_iterations, ..CalibConfig::default() };
    let (surface, report) = rs_calibrate(&quotes.inner, h, delta, &cfg).map_err(to_py)?;
    Ok((PySurface { inner: surface }, report.residuals, report.iterations))
}

/// Dupire local vol from implied-vol derivatives in log-moneyness.
#[pyfunction]
fn dupire_local_vol(t: f64, x: f64, sigma: f64, d_t: f64, d_x: f64, d_xx: f64) -> PyResult<f64> {
    rs_dupire_logm(t, x, &VolDerivsLogm { sigma, d_t, d_x, d_xx }).map_err(to_py)
}

/// Implied and local ATM skews from Fourier smiles at maturity t.
#[pyfunction]
#[pyo3(signature = (params, t, zeta_eps = 0.05))]
fn fourier_atm_skews(params: &PyModelParams, t: f64, zeta_eps: f64) -> PyResult<(f64, f64)> {
    let provider = FourierSmile { params: params.inner, quad: QuadConfig::default() };
    let (implied, _) = atm_skew_implied(&provider, t, zeta_eps, &params.inner).map_err(to_py)?;
    let (local, _) = atm_skew_local(&provider, t, zeta_eps, &params.inner).map_err(to_py)?;
    Ok((implied, local))
}

/// Fixed-slope power-law fit; returns (alpha, t_crit, slope_at_crit).
#[pyfunction]
#[pyo3(signature = (times, skews, beta, candidates, slope_tol = 0.02))]
fn fixed_slope_fit(
    times: Vec<f64>,
    skews: Vec<f64>,
    beta: f64,
    candidates: Vec<f64>,
    slope_tol: f64,
) -> PyResult<(f64, f64, f64)> {
    let (alpha, t_crit, diag) =
        fixed_slope_regression_with_tol(&times, &skews, beta, &candidates, slope_tol)
            .map_err(to_py)?;
    Ok((alpha, t_crit, diag.slope_at_crit))
}

/// Full skew-ratio study; returns a dict of the headline scalars plus the
/// figure table as tab-delimited text.
#[pyfunction]
#[pyo3(signature = (params, n_factors, gamma_first, gamma_last, t_min, t_max,
                    points_per_decade = 40, n_paths = 100_000, seed = 7,
                    fourier_max_t = 0.02, slope_tol = 0.05))]
#[allow(clippy::too_many_arguments)]
fn skew_study(
    py: Python<'_>,
    params: &PyModelParams,
    n_factors: usize,
    gamma_first: f64,
    gamma_last: f64,
    t_min: f64,
    t_max: f64,
    points_per_decade: usize,
    n_paths: usize,
    seed: u64,
    fourier_max_t: f64,
    slope_tol: f64,
) -> PyResult<Py<pyo3::types::PyDict>> {
    let mut cfg = SkewStudyConfig::new(params.inner, n_factors, gamma_first, gamma_last);
    cfg.t_min = t_min;
    cfg.t_max = t_max;
    cfg.points_per_decade = points_per_decade;
    cfg.n_paths = n_paths;
    cfg.seed = seed;
    cfg.fourier_max_t = fourier_max_t;
    cfg.slope_tol = slope_tol;
    cfg.zeta_sensitivity = vec![];
    let study = skew_ratio_study(&cfg).map_err(to_py)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("ratio", study.ratio)?;
    dict.set_item("beta", study.beta)?;
    dict.set_item("alpha_sigma", study.alpha_sigma)?;
    dict.set_item("alpha_eta", study.alpha_eta)?;
    dict.set_item("t_crit_sigma", study.t_crit_sigma)?;
    dict.set_item("t_crit_eta", study.t_crit_eta)?;
    dict.set_item("tau_short", study.tau_short)?;
    dict.set_item("table", study.to_delimited())?;
    Ok(dict.unbind())
}

#[pymodule]
fn hmlv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelParams>()?;
    m.add_class::<PyLift>()?;
    m.add_class::<PyBatch>()?;
    m.add_class::<PyQuotes>()?;
    m.add_class::<PySurface>()?;
    m.add_function(wrap_pyfunction!(build_lift, m)?)?;
    m.add_function(wrap_pyfunction!(fractional_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_lift, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_hmlv, m)?)?;
    m.add_function(wrap_pyfunction!(fourier_smile, m)?)?;
    m.add_function(wrap_pyfunction!(rough_heston_cf_price, m)?)?;
    m.add_function(wrap_pyfunction!(heston_cf_price, m)?)?;
    m.add_function(wrap_pyfunction!(implied_vol, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_local_vol, m)?)?;
    m.add_function(wrap_pyfunction!(dupire_local_vol, m)?)?;
    m.add_function(wrap_pyfunction!(fourier_atm_skews, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_slope_fit, m)?)?;
    m.add_function(wrap_pyfunction!(skew_study, m)?)?;
    Ok(())
}
